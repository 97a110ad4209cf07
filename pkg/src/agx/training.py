"""Mini-batch training of the two-branch model and batched inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import report_graph as rg
from . import toynet
from .config import TrainConfig
from .locmetrics import auprc

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSplit:
    ids: list[str]
    images: np.ndarray       # (N, H, W)
    anat_labels: np.ndarray  # (N, N_a) in {0, 1}
    obs_labels: np.ndarray   # (N, N_o) in {1, 0, -1}
    pmask: np.ndarray        # (N, N_a, N_o) report cell == P

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_matrices(cls, ids, images, matrices, anat_tokens, obs_tokens) -> "TrainSplit":
        rows = [matrices[0].anatomy_tokens.index(a) for a in anat_tokens]
        cols = [matrices[0].observation_tokens.index(o) for o in obs_tokens]
        grids = np.stack([A.grid for A in matrices])
        sub = grids[:, rows][:, :, cols]
        full_p = grids == rg.P
        has_n = (grids[:, :, cols] == rg.N).any(axis=1)
        has_p = full_p[:, :, cols].any(axis=1)
        obs = np.where(has_p, rg.POSITIVE, np.where(has_n, rg.NEGATIVE, rg.UNLABELED))
        anat = full_p[:, rows].any(axis=2).astype(np.int64)
        return cls(list(ids), np.asarray(images, dtype=np.float64), anat, obs.astype(np.int64),
                   sub == rg.P)


@dataclass
class TrainData:
    anat_tokens: tuple[str, ...]
    obs_tokens: tuple[str, ...]
    train: TrainSplit
    val: TrainSplit
    test: TrainSplit


def make_train_data(dataset) -> TrainData:
    """Training bundle from a `SyntheticDataset`: region rows are the anatomy labels."""
    anat, obs = dataset.region_tokens, dataset.observation_tokens
    splits = {}
    for name in ("train", "val", "test"):
        idx = dataset.indices(name)
        splits[name] = TrainSplit.from_matrices(
            [dataset.scene_ids[i] for i in idx], dataset.images[idx],
            [dataset.matrices[i] for i in idx], anat, obs)
    return TrainData(tuple(anat), tuple(obs), **splits)


def fit(params, split: TrainSplit, config: TrainConfig, val: TrainSplit | None = None,
        obs_mask=None, epochs: int | None = None, lr: float | None = None, stage: int = 0):
    """Train in place of ``params`` (a new dict is returned); returns (params, epoch log).

    ``obs_mask`` zeroes the loss of (sample, observation) pairs, which is how
    PU relabeling drops the top-ranked unlabeled samples. ``lr`` replaces the
    base learning rate; the step decay schedule still applies.
    """
    epochs = config.epochs if epochs is None else epochs
    base_lr = config.learning_rate if lr is None else lr
    n = len(split)
    mask = np.ones(split.obs_labels.shape) if obs_mask is None else np.asarray(obs_mask, float)
    anat_w = toynet.LossWeights.balanced(split.anat_labels)
    obs_w = toynet.LossWeights.balanced(split.obs_labels, mask)
    rng = np.random.default_rng([config.seed, stage])
    velocity: dict = {}
    history = []
    for epoch in range(epochs):
        lr_now = base_lr * config.lr_decay_factor ** (epoch // config.lr_decay_epochs)
        order = rng.permutation(n)
        total, first = 0.0, None
        for start in range(0, n, config.batch_size):
            b = order[start:start + config.batch_size]
            try:
                graph = toynet.forward_joint(
                    params, split.images[b], split.anat_labels[b], split.obs_labels[b],
                    split.pmask[b], anat_w, obs_w, config.beta, config.aga_enabled, mask[b])
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {start // config.batch_size}: {exc}") from exc
            grads = toynet.backward(graph)
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDiverged(f"epoch {epoch}: non-finite gradient")
            params, velocity = toynet.sgd_step(params, grads, lr_now, config.momentum,
                                               config.weight_decay, velocity)
            total += graph.loss * len(b)
            if first is None:
                first = graph.loss
        entry = {"epoch": epoch, "lr": lr_now, "loss": total / n, "first_batch_loss": first}
        if val is not None:
            entry["val_auprc"] = validation_auprc(params, val, config)
        history.append(entry)
        log.debug("epoch %d: %s", epoch, entry)
    return params, history


def _batched(fn, images, batch=64):
    return np.concatenate([fn(images[i:i + batch]) for i in range(0, len(images), batch)])


def predict_observations(params, images) -> np.ndarray:
    """Observation probabilities at inference time (attention map fixed at zero)."""
    def run(x):
        f_o, _, _ = toynet.encode(toynet._as_batch(x), params, "obs")
        return toynet.sigmoid(toynet.gap(f_o) @ params["obs.heads"].T)
    return _batched(run, images)


def predict_anatomy(params, images) -> np.ndarray:
    return _batched(lambda x: toynet.forward_anatomy(x, params)[1], images)


def observation_cams(params, images) -> np.ndarray:
    """(N, S, S, N_o) inference CAMs of the observation heads."""
    def run(x):
        f_o, _, _ = toynet.encode(toynet._as_batch(x), params, "obs")
        return toynet.compute_cam(f_o, params["obs.heads"])
    return _batched(run, images)


def anatomy_cams(params, images) -> np.ndarray:
    def run(x):
        f_a, _ = toynet.forward_anatomy(x, params)
        return toynet.compute_cam(f_a, params["anat.heads"])
    return _batched(run, images)


def label_auprcs(scores: np.ndarray, labels: np.ndarray) -> list[float | None]:
    """AUPRC per column on labeled positives vs labeled negatives (unlabeled excluded)."""
    out = []
    for k in range(labels.shape[1]):
        keep = labels[:, k] != rg.UNLABELED
        y = labels[keep, k] == rg.POSITIVE
        out.append(auprc(scores[keep, k], y) if 0 < y.sum() < y.size else None)
    return out


def validation_auprc(params, val: TrainSplit, config: TrainConfig | None = None) -> float:
    vals = [v for v in label_auprcs(predict_observations(params, val.images), val.obs_labels)
            if v is not None]
    return float(np.mean(vals)) if vals else float("nan")
