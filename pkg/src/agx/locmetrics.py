"""CAM -> boxes, box matching, and ranking metrics.

Boxes are integer pixel rectangles, half-open: [x_min, x_max) x [y_min, y_max),
with x the column index and y the row index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_list()}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass
class EvalConfig:
    quantile: float = 0.95
    connectivity: int = 8
    iou_thresholds: tuple[float, ...] = (0.1, 0.25, 0.5)

    def __post_init__(self):
        if not 0.0 < self.quantile < 1.0:
            raise ValueError("quantile must lie in (0, 1)")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        if any(not 0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must lie in (0, 1]")


@dataclass
class MatchResult:
    n_gt: int
    n_pred: int
    true_positives: int
    gt_covered: int
    recall: float | None
    precision: float | None


def quantile_threshold(cam: np.ndarray, q: float) -> np.ndarray:
    """Pixels strictly above the linear-interpolation q-quantile of the map."""
    cam = np.asarray(cam, dtype=np.float64)
    return cam > np.quantile(cam, q, method="linear")


def connected_components(mask: np.ndarray, connectivity: int = 8) -> list[np.ndarray]:
    """Maximal connected regions, each an (n, 2) array of (row, col) pixels.

    Regions come in raster order of their first pixel.
    """
    structure = ndimage.generate_binary_structure(2, 2 if connectivity == 8 else 1)
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=structure)
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, n + 2))
    cols = labels.shape[1]
    regions = []
    for i in range(n):
        idx = order[bounds[i]:bounds[i + 1]]
        regions.append(np.stack([idx // cols, idx % cols], axis=1))
    return regions


def regions_to_boxes(regions) -> list[BBox]:
    boxes = []
    for r in regions:
        r = np.asarray(r)
        boxes.append(BBox(int(r[:, 1].min()), int(r[:, 0].min()),
                          int(r[:, 1].max()) + 1, int(r[:, 0].max()) + 1))
    return boxes


def upsample_bilinear(cam: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize on pixel centres (edge-clamped)."""
    cam = np.asarray(cam, dtype=np.float64)

    def axis_weights(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, wr = axis_weights(cam.shape[0], shape[0])
    c0, c1, wc = axis_weights(cam.shape[1], shape[1])
    rows = cam[r0] * (1 - wr)[:, None] + cam[r1] * wr[:, None]
    return rows[:, c0] * (1 - wc) + rows[:, c1] * wc


def cam_to_boxes(cam: np.ndarray, config: EvalConfig, image_shape=None) -> list[BBox]:
    if image_shape is not None and tuple(image_shape) != cam.shape:
        cam = upsample_bilinear(cam, image_shape)
    mask = quantile_threshold(cam, config.quantile)
    return regions_to_boxes(connected_components(mask, config.connectivity))


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def match_and_score(pred_boxes, gt_boxes, T: float) -> MatchResult:
    """A prediction is a true positive iff IoU > T with some GT box.

    recall = GT boxes hit by at least one true positive / GT boxes;
    precision = true positives / predictions. No one-to-one assignment.
    """
    if not 0.0 < T <= 1.0:
        raise ValueError("T must lie in (0, 1]")
    pred_boxes, gt_boxes = list(pred_boxes), list(gt_boxes)
    hits = np.array([[iou(p, g) > T for g in gt_boxes] for p in pred_boxes], dtype=bool)
    hits = hits.reshape(len(pred_boxes), len(gt_boxes))
    tp = int(hits.any(axis=1).sum())
    covered = int(hits.any(axis=0).sum())
    return MatchResult(
        n_gt=len(gt_boxes), n_pred=len(pred_boxes), true_positives=tp, gt_covered=covered,
        recall=covered / len(gt_boxes) if gt_boxes else None,
        precision=tp / len(pred_boxes) if pred_boxes else None,
    )


@dataclass
class LocalizationReport:
    """Per label and IoU threshold: pooled box counts plus image-level recall."""
    entries: dict[str, dict[str, dict]] = field(default_factory=dict)

    def add(self, label: str, T: float, result: MatchResult) -> None:
        e = self.entries.setdefault(label, {}).setdefault(
            _tkey(T), {"n_gt": 0, "n_pred": 0, "true_positives": 0, "gt_covered": 0,
                       "n_images": 0, "images_hit": 0})
        e["n_gt"] += result.n_gt
        e["n_pred"] += result.n_pred
        e["true_positives"] += result.true_positives
        e["gt_covered"] += result.gt_covered
        if result.n_gt:
            e["n_images"] += 1
            e["images_hit"] += int(result.gt_covered > 0)

    def summary(self) -> dict:
        out = {}
        for label, per_t in self.entries.items():
            out[label] = {}
            for t, e in per_t.items():
                out[label][t] = {
                    **e,
                    "recall": e["gt_covered"] / e["n_gt"] if e["n_gt"] else None,
                    "precision": e["true_positives"] / e["n_pred"] if e["n_pred"] else None,
                    "image_recall": e["images_hit"] / e["n_images"] if e["n_images"] else None,
                }
        return out

    def recall(self, label: str, T: float) -> float | None:
        return self.summary()[label][_tkey(T)]["recall"]


def _tkey(T: float) -> str:
    return f"{float(T):g}"


# -- ranking metrics --------------------------------------------------------------

def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("need both positive and negative labels")
    return s, y


def _curve(s, y):
    """Cumulative TP/FP counts at each distinct threshold, descending."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return tp, fp


def auroc(scores, labels) -> float:
    s, y = _check_binary(scores, labels)
    tp, fp = _curve(s, y)
    tpr = np.r_[0.0, tp / tp[-1]]
    fpr = np.r_[0.0, fp / fp[-1]]
    return float(np.trapezoid(tpr, fpr))


def auprc(scores, labels) -> float:
    """Step-interpolated area: sum over thresholds of (R_n - R_{n-1}) * P_n."""
    s, y = _check_binary(scores, labels)
    tp, fp = _curve(s, y)
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
