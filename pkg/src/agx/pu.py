"""Positive-unlabeled learning: Best Bin Estimation and self-training relabeling.

The unlabeled score distribution is modelled as a mixture
``P_u = alpha * P_p + (1 - alpha) * P_n``. `bbe_estimate` picks the score
threshold whose upper confidence bound on the top-bin ratio
``(1 - F_u(z)) / (1 - F_p(z))`` is smallest and reports the plain ratio there.
`self_train` wraps the training loop: warm start with unlabeled as negative,
then repeatedly estimate alpha on validation scores, drop the top-alpha
unlabeled training samples and retrain on the rest as provisional negatives.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ScoreSets:
    z_p: np.ndarray
    z_u: np.ndarray
    z_n: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        for name in ("z_p", "z_u", "z_n"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if arr.size and (arr.min() < 0 or arr.max() > 1):
                raise ValueError(f"{name}: scores must lie in [0, 1]")
            setattr(self, name, arr)


class EmpiricalCdf:
    """Right-continuous ECDF: query(z) = fraction of samples <= z."""

    def __init__(self, samples: Iterable[float]):
        self.values = np.sort(np.asarray(list(samples) if not isinstance(samples, np.ndarray)
                                         else samples, dtype=np.float64).ravel())
        if self.values.size == 0:
            raise ValueError("empirical_cdf needs at least one sample")

    def __len__(self):
        return self.values.size

    def query(self, z):
        return np.searchsorted(self.values, z, side="right") / self.values.size

    __call__ = query

    def tail(self, z):
        """Fraction of samples strictly above z."""
        return 1.0 - self.query(z)


def empirical_cdf(samples) -> EmpiricalCdf:
    return EmpiricalCdf(samples)


@dataclass
class PuEstimate:
    alpha: float
    best_bin_threshold: float
    ucb_curve: list[tuple[float, float]] = field(default_factory=list, repr=False)
    n_p: int = 0
    n_u: int = 0

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "threshold": self.best_bin_threshold,
                "n_p": self.n_p, "n_u": self.n_u,
                "ucb_curve": [[z, u] for z, u in self.ucb_curve]}


def dkw_width(delta: float, n: int) -> float:
    return math.sqrt(math.log(4.0 / delta) / (2.0 * n))


def bbe_estimate(scores: ScoreSets, delta: float = 0.1, gamma: float = 0.01) -> PuEstimate:
    if scores.z_p.size == 0 or scores.z_u.size == 0:
        raise ValueError("bbe_estimate needs positive and unlabeled scores")
    F_p, F_u = EmpiricalCdf(scores.z_p), EmpiricalCdf(scores.z_u)
    z = np.unique(np.concatenate([scores.z_p, scores.z_u]))
    q_p, q_u = F_p.tail(z), F_u.tail(z)
    ucb = (q_u + dkw_width(delta, len(F_u))) / np.maximum(q_p - dkw_width(delta, len(F_p)), gamma)
    best = int(np.argmin(ucb))  # first minimum = smallest threshold
    alpha = _ratio(q_u[best], q_p[best])
    return PuEstimate(alpha, float(z[best]), list(zip(z.tolist(), ucb.tolist())),
                      len(F_p), len(F_u))


def _ratio(q_u: float, q_p: float) -> float:
    if q_p <= 0:
        return 1.0 if q_u > 0 else 0.0
    return float(min(max(q_u / q_p, 0.0), 1.0))


def n_removed(alpha: float, n_unlabeled: int) -> int:
    # tolerance keeps e.g. 0.14 * 100 from rounding up to 15
    return min(n_unlabeled, max(0, math.ceil(alpha * n_unlabeled - 1e-9)))


def rank_and_relabel(unlabeled_scores: Sequence[tuple[object, float]], alpha: float):
    """Split unlabeled samples into the top ceil(alpha*|U|) and the rest.

    Returns (removed, provisional_negatives) as sets of sample ids. Ties in
    score are broken by input order.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    items = list(unlabeled_scores)
    order = sorted(range(len(items)), key=lambda i: (-items[i][1], i))
    k = n_removed(alpha, len(items))
    removed = {items[i][0] for i in order[:k]}
    return removed, {items[i][0] for i in order[k:]}


def self_train(params, data, config, on_iteration=None):
    """Warm start, then alternate BBE estimation and relabeled retraining.

    ``data`` is a `agx.training.TrainData` bundle with ``train`` and ``val``
    splits. Stops once mean validation AUPRC has not improved for
    ``config.pu.patience`` consecutive iterations (or after
    ``config.pu.max_iterations``) and returns the best parameters seen,
    together with the per-iteration log.
    """
    from . import training  # training never imports pu

    tc, pc = config.train, config.pu
    params, warm_log = training.fit(params, data.train, tc, val=data.val)
    best_params, best_auprc = params, training.validation_auprc(params, data.val, tc)
    history = [{"iteration": 0, "val_auprc": best_auprc, "alpha": None, "removed": None,
                "train_log": warm_log}]
    log.info("PU warm start: val AUPRC %.4f", best_auprc)
    stale = 0
    for it in range(1, pc.max_iterations + 1):
        estimates, obs_mask = relabel_round(params, data, tc, pc)
        params, fit_log = training.fit(params, data.train, tc, val=data.val, obs_mask=obs_mask,
                                       epochs=pc.retrain_epochs, lr=pc.retrain_lr, stage=it)
        auprc = training.validation_auprc(params, data.val, tc)
        history.append({
            "iteration": it,
            "val_auprc": auprc,
            "alpha": [None if e is None else e.alpha for e in estimates],
            "threshold": [None if e is None else e.best_bin_threshold for e in estimates],
            "removed": [int(n) for n in (obs_mask == 0).sum(axis=0)],
            "train_log": fit_log,
        })
        log.info("PU iteration %d: alpha=%s val AUPRC %.4f", it, history[-1]["alpha"], auprc)
        if on_iteration is not None:
            on_iteration(history[-1])
        if auprc > best_auprc:
            best_params, best_auprc, stale = params, auprc, 0
        else:
            stale += 1
            if stale >= pc.patience:
                break
    return best_params, history


def relabel_round(params, data, train_config, pu_config):
    """One estimation + relabeling pass; returns (estimates, training loss mask)."""
    from . import training

    val_scores = training.predict_observations(params, data.val.images)
    train_scores = training.predict_observations(params, data.train.images)
    K = data.train.obs_labels.shape[1]
    obs_mask = np.ones(data.train.obs_labels.shape)
    estimates: list[PuEstimate | None] = []
    for k in range(K):
        y_val = data.val.obs_labels[:, k]
        z_p, z_u = val_scores[y_val == 1, k], val_scores[y_val == -1, k]
        if z_p.size == 0 or z_u.size == 0:
            log.warning("observation %d: no validation positives or unlabeled; skipping estimation", k)
            estimates.append(None)
            continue
        est = bbe_estimate(ScoreSets(z_p, z_u, val_scores[y_val == 0, k]),
                           pu_config.delta, pu_config.gamma)
        estimates.append(est)
        u_idx = np.flatnonzero(data.train.obs_labels[:, k] == -1)
        removed, _ = rank_and_relabel([(int(i), float(train_scores[i, k])) for i in u_idx], est.alpha)
        obs_mask[sorted(removed), k] = 0.0
    return estimates, obs_mask
