"""Shared builders for tests: a tiny seeded model problem and its gradient check."""

from __future__ import annotations

import numpy as np

from agx import toynet
from oracles import central_difference


def toy_problem(seed: int, batch=3, size=16, channels=4, n_anat=4, n_obs=3, beta=0.7):
    rng = np.random.default_rng(seed)
    params = toynet.init_params(seed, n_anat, n_obs, channels=channels)
    for name in params:
        if name.endswith(".bias"):
            params[name] = rng.normal(0, 0.1, params[name].shape)
    x = rng.random((batch, size, size))
    anat_y = rng.integers(0, 2, (batch, n_anat))
    obs_y = rng.integers(-1, 2, (batch, n_obs))
    pmask = rng.random((batch, n_anat, n_obs)) < 0.5
    anat_w = toynet.LossWeights.balanced(anat_y)
    obs_w = toynet.LossWeights.balanced(obs_y)
    return dict(params=params, x=x, anat_y=anat_y, obs_y=obs_y, pmask=pmask,
                anat_w=anat_w, obs_w=obs_w, beta=beta)


def loss_of(problem, aga_enabled=True) -> float:
    p = problem
    return toynet.forward_joint(p["params"], p["x"], p["anat_y"], p["obs_y"], p["pmask"],
                                p["anat_w"], p["obs_w"], p["beta"], aga_enabled).loss


def gradient_errors(problem, h=1e-5, max_entries=None, rng=None) -> dict[str, float]:
    """Per parameter array: ||analytic - numeric|| / max(||analytic||, ||numeric||)."""
    p = problem
    graph = toynet.forward_joint(p["params"], p["x"], p["anat_y"], p["obs_y"], p["pmask"],
                                 p["anat_w"], p["obs_w"], p["beta"])
    grads = toynet.backward(graph)
    errors = {}
    for name, w in p["params"].items():
        idx = list(np.ndindex(w.shape))
        if max_entries is not None and len(idx) > max_entries:
            pick = (rng or np.random.default_rng(0)).choice(len(idx), max_entries, replace=False)
            idx = [idx[i] for i in pick]
        num = np.array([central_difference(lambda: loss_of(p), p["params"], name, i, h) for i in idx])
        ana = np.array([grads[name][i] for i in idx])
        scale = max(np.linalg.norm(ana), np.linalg.norm(num))
        errors[name] = 0.0 if scale == 0 else float(np.linalg.norm(ana - num) / scale)
    return errors
