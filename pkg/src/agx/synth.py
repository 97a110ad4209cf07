"""Synthetic scenes with planted lesions and corrupted reports.

A scene is a square image split into a grid of "anatomical" regions, each
with its own base intensity (a fixed atlas, like organs in a radiograph).
Each observation is present with probability ``prevalence``; a present
observation plants a lesion of its own shape inside one (sometimes two)
randomly chosen regions. The clean report has P exactly at the planted
(region, observation) cells; absent observations are sometimes mentioned as
N on the ``unspecified`` row. Reporting noise then turns each P into U with
the observation's dropout rate, so the share of positives among unlabeled
samples is known by construction.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import report_graph as rg
from .config import SynthConfig
from .locmetrics import BBox

SPLITS = ("train", "val", "test")
HELDOUT = "heldout"


@dataclass
class Lesion:
    observation: int
    region: int
    size: int
    intensity: float
    box: BBox

    def to_dict(self):
        d = asdict(self)
        d["box"] = self.box.as_list()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["observation"], d["region"], d["size"], d["intensity"], BBox(*d["box"]))


@dataclass
class SyntheticDataset:
    config: SynthConfig
    seed: int
    vocab: rg.Vocabulary
    scene_ids: list[str]
    split: np.ndarray          # (N,) of "train" / "val" / "test"
    images: np.ndarray         # (N, H, W)
    matrices: list[rg.AdjacencyMatrix]  # reported, after dropout
    clean_grids: np.ndarray    # (N, rows, cols) before dropout
    lesions: list[list[Lesion]]
    present: np.ndarray        # (N, K) ground-truth presence
    dropout: tuple[float, ...]

    @property
    def region_tokens(self) -> tuple[str, ...]:
        return self.vocab.anatomy_tokens[: self.config.grid ** 2]

    @property
    def observation_tokens(self) -> tuple[str, ...]:
        return tuple(self.config.observations)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def region_box(self, region: int) -> BBox:
        size = self.config.image_size // self.config.grid
        r, c = divmod(region, self.config.grid)
        return BBox(c * size, r * size, (c + 1) * size, (r + 1) * size)

    def gt_boxes(self, i: int) -> dict[str, list[BBox]]:
        """Observation lesion boxes plus region boxes of abnormal regions for scene i."""
        out: dict[str, list[BBox]] = {}
        for les in self.lesions[i]:
            out.setdefault(self.observation_tokens[les.observation], []).append(les.box)
        for region in sorted({les.region for les in self.lesions[i]}):
            out.setdefault(self.region_tokens[region], []).append(self.region_box(region))
        return out

    def weak_obs_labels(self) -> np.ndarray:
        cols = [self.vocab.observation_col(o) for o in self.observation_tokens]
        return np.stack([_obs_labels(A.grid[:, cols]) for A in self.matrices])

    def planted_stats(self) -> dict:
        """Per observation: U-conversion fraction of planted P cells and the true
        positive share of each split's unlabeled pool."""
        cols = [self.vocab.observation_col(o) for o in self.observation_tokens]
        reported = np.stack([A.grid for A in self.matrices])
        y = self.weak_obs_labels()
        out = {}
        for k, obs in enumerate(self.observation_tokens):
            planted = self.clean_grids[:, :, cols[k]] == rg.P
            converted = planted & (reported[:, :, cols[k]] == rg.U)
            entry = {
                "dropout": self.dropout[k],
                "planted_p": int(planted.sum()),
                "converted_to_u": int(converted.sum()),
                "conversion_fraction": float(converted.sum() / max(planted.sum(), 1)),
            }
            for split in SPLITS:
                idx = self.indices(split)
                u = y[idx, k] == -1
                entry[f"alpha_{split}"] = float(self.present[idx, k][u].mean()) if u.any() else None
                entry[f"n_unlabeled_{split}"] = int(u.sum())
            out[obs] = entry
        return out


def _obs_labels(grid_cols: np.ndarray) -> np.ndarray:
    has_p = (grid_cols == rg.P).any(axis=0)
    has_n = (grid_cols == rg.N).any(axis=0)
    return np.where(has_p, 1, np.where(has_n, 0, -1))


def synthetic_vocabulary(config: SynthConfig) -> rg.Vocabulary:
    regions = [f"region_{r}_{c}" for r in range(config.grid) for c in range(config.grid)]
    return rg.Vocabulary(regions, config.observations)


def dropout_for_alpha(alpha: float, prevalence: float, negative_mention_rate: float,
                      multi_region_rate: float = 0.0) -> float:
    """Dropout rate d that makes the expected positive share of the unlabeled pool equal alpha.

    An image's column becomes unlabeled when all of its P cells drop (one cell
    with prob 1 - r, two with prob r) or when the observation is absent and
    not mentioned.
    """
    if alpha <= 0:
        return 0.0
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    target = alpha * (1 - prevalence) * (1 - negative_mention_rate) / (prevalence * (1 - alpha))
    r = multi_region_rate
    d = target if r == 0 else (-(1 - r) + math.sqrt((1 - r) ** 2 + 4 * r * target)) / (2 * r)
    if not 0 <= d < 1:
        raise ValueError(f"alpha={alpha} is unreachable with these prevalence/mention rates")
    return d


def atlas(config: SynthConfig) -> np.ndarray:
    n, R = config.image_size, config.grid
    size = n // R
    levels = np.linspace(0.05, 0.35, R * R)
    img = np.full((n, n), levels[-1])
    for j in range(R * R):
        r, c = divmod(j, R)
        img[r * size:(r + 1) * size, c * size:(c + 1) * size] = levels[j]
    return img


def lesion_pattern(kind: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2
    kind %= 4
    if kind == 0:    # filled disk
        pat = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2) ** 2
    elif kind == 1:  # hollow square
        pat = (yy == 0) | (xx == 0) | (yy == size - 1) | (xx == size - 1)
    elif kind == 2:  # horizontal stripes
        pat = (yy % 2 == 0)
    else:            # diagonal cross
        pat = (yy == xx) | (yy == size - 1 - xx)
    return pat.astype(np.float64)


def _scene(config: SynthConfig, vocab: rg.Vocabulary, dropout, rng: np.random.Generator,
           base: np.ndarray, doc_id: str):
    R, K = config.grid, len(config.observations)
    size = config.image_size // R
    img = base.copy()
    clean = rg.AdjacencyMatrix.empty(doc_id, vocab)
    present = rng.random(K) < config.prevalence
    n_regions = np.where(rng.random(K) < config.multi_region_rate, 2, 1) * present
    free = list(rng.permutation(R * R))
    lesions = []
    unspec = vocab.anatomy_row(rg.UNSPECIFIED)
    mention = rng.random(K) < config.negative_mention_rate
    for k in range(K):
        col = vocab.observation_col(config.observations[k])
        if not present[k]:
            if mention[k]:
                clean.grid[unspec, col] = rg.N
            continue
        for _ in range(int(n_regions[k])):
            if not free:
                break
            region = int(free.pop())
            s = int(rng.integers(config.lesion_size[0], config.lesion_size[1] + 1))
            amp = float(rng.uniform(*config.lesion_intensity))
            r, c = divmod(region, R)
            y0 = r * size + int(rng.integers(1, size - s))
            x0 = c * size + int(rng.integers(1, size - s))
            pat = lesion_pattern(k, s)
            img[y0:y0 + s, x0:x0 + s] += amp * pat
            ys, xs = np.nonzero(pat)
            box = BBox(x0 + int(xs.min()), y0 + int(ys.min()), x0 + int(xs.max()) + 1, y0 + int(ys.max()) + 1)
            lesions.append(Lesion(k, region, s, amp, box))
            clean.grid[region, col] = rg.P
    if config.shortcut_rate > 0:
        for k in range(K):
            p = config.shortcut_rate if present[k] else 0.1 * config.shortcut_rate
            if rng.random() < p:
                y, x = 1 + 3 * k, config.image_size - 4
                img[y:y + 2, x:x + 2] += config.lesion_intensity[1]
    img += rng.normal(0.0, config.noise, img.shape)

    reported = clean.grid.copy()
    for k in range(K):
        col = vocab.observation_col(config.observations[k])
        for row in np.flatnonzero(reported[:, col] == rg.P):
            if rng.random() < dropout[k]:
                reported[row, col] = rg.U
    matrix = rg.AdjacencyMatrix(doc_id, vocab.anatomy_tokens, vocab.observation_tokens, reported)
    return img, matrix, clean.grid, lesions, present


def synth_generate(config: SynthConfig, seed: int) -> SyntheticDataset:
    vocab = synthetic_vocabulary(config)
    if config.target_alpha is not None:
        dropout = tuple(dropout_for_alpha(a, config.prevalence, config.negative_mention_rate,
                                          config.multi_region_rate)
                        for a in config.per_observation(config.target_alpha))
    else:
        dropout = config.per_observation(config.dropout)

    master = np.random.SeedSequence(seed)
    split_rng = np.random.default_rng(master.spawn(1)[0])
    scene_seqs = master.spawn(config.n_scenes)
    heldout_seqs = master.spawn(config.n_heldout)
    base = atlas(config)
    ids = [f"scene_{i:05d}" for i in range(config.n_scenes)]
    ids += [f"heldout_{i:05d}" for i in range(config.n_heldout)]
    scene_seqs = scene_seqs + heldout_seqs
    out = [_scene(config, vocab, dropout, np.random.default_rng(s), base, doc_id)
           for s, doc_id in zip(scene_seqs, ids)]

    n = config.n_scenes
    n_train, n_val = int(round(0.8 * n)), int(round(0.1 * n))
    split = np.full(n + config.n_heldout, HELDOUT, dtype=object)
    order = split_rng.permutation(n)
    split[order[:n_train]] = "train"
    split[order[n_train:n_train + n_val]] = "val"
    split[order[n_train + n_val:]] = "test"

    return SyntheticDataset(
        config=config, seed=seed, vocab=vocab, scene_ids=ids, split=split.astype(str),
        images=np.stack([o[0] for o in out]),
        matrices=[o[1] for o in out],
        clean_grids=np.stack([o[2] for o in out]),
        lesions=[o[3] for o in out],
        present=np.stack([o[4] for o in out]),
        dropout=tuple(float(d) for d in dropout),
    )


# -- persistence ------------------------------------------------------------------

def save_dataset(ds: SyntheticDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "matrices").mkdir(parents=True, exist_ok=True)
    np.save(out / "images.npy", ds.images)
    np.save(out / "clean_grids.npy", ds.clean_grids)
    meta = {
        "seed": ds.seed,
        "config": asdict(ds.config),
        "anatomy_tokens": list(ds.vocab.anatomy_tokens),
        "observation_tokens": list(ds.vocab.observation_tokens),
        "scene_ids": ds.scene_ids,
        "split": ds.split.tolist(),
        "present": ds.present.astype(int).tolist(),
        "dropout": list(ds.dropout),
        "lesions": [[les.to_dict() for les in scene] for scene in ds.lesions],
        "planted": ds.planted_stats(),
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=1))
    for A in ds.matrices:
        (out / "matrices" / f"{A.doc_id}.csv").write_text(rg.export_matrix(A))
    with open(out / "boxes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label", "x_min", "y_min", "x_max", "y_max"])
        for i, sid in enumerate(ds.scene_ids):
            for label, boxes in ds.gt_boxes(i).items():
                for b in boxes:
                    w.writerow([sid, label, *b.as_list()])


def load_dataset(path: str | Path) -> SyntheticDataset:
    path = Path(path)
    meta = json.loads((path / "dataset.json").read_text())
    config = SynthConfig(**meta["config"])
    vocab = rg.Vocabulary(meta["anatomy_tokens"], meta["observation_tokens"])
    matrices = [rg.import_matrix((path / "matrices" / f"{sid}.csv").read_text())
                for sid in meta["scene_ids"]]
    return SyntheticDataset(
        config=config, seed=meta["seed"], vocab=vocab, scene_ids=meta["scene_ids"],
        split=np.array(meta["split"]), images=np.load(path / "images.npy"),
        matrices=matrices, clean_grids=np.load(path / "clean_grids.npy"),
        lesions=[[Lesion.from_dict(d) for d in scene] for scene in meta["lesions"]],
        present=np.array(meta["present"], dtype=bool), dropout=tuple(meta["dropout"]),
    )


def read_boxes(path: str | Path) -> dict[str, dict[str, list[BBox]]]:
    """GT box file -> {image_id: {label: [BBox, ...]}}."""
    out: dict[str, dict[str, list[BBox]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            box = BBox(int(row["x_min"]), int(row["y_min"]), int(row["x_max"]), int(row["y_max"]))
            out.setdefault(row["image_id"], {}).setdefault(row["label"], []).append(box)
    return out
