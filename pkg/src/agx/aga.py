"""Anatomy-guided attention maps.

For observation k, the raw map is the sum of anatomy CAMs over rows whose
report cell is P; it is then min-max normalized to [0, 1]. A constant raw map
(including the empty sum) normalizes to all zeros, so the residual
``(1 + beta * H) * f`` degrades to the identity.

The batched helpers (`aggregate`, `minmax_normalize`, `minmax_backward`) sit on
the training path; the min/max locations are held fixed in the backward pass.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .report_graph import P, AdjacencyMatrix


@dataclass
class AgaMap:
    observation_token: str
    map: np.ndarray = field(repr=False)
    contributing_rows: list[str] = field(default_factory=list)


def build_aga_map(A: AdjacencyMatrix, k: int | str, cams: Mapping[str, np.ndarray]) -> AgaMap:
    """Aggregate the CAMs of every anatomy row marked P in column ``k``.

    ``cams`` maps anatomy token -> S x S CAM; it must cover every contributing row.
    """
    if isinstance(k, str):
        k = A.observation_tokens.index(k)
    rows = [A.anatomy_tokens[j] for j in np.flatnonzero(A.grid[:, k] == P)]
    if not rows:
        shape = next(iter(cams.values())).shape if cams else (0, 0)
        return AgaMap(A.observation_tokens[k], np.zeros(shape), [])
    missing = [r for r in rows if r not in cams]
    if missing:
        raise KeyError(f"no CAM for contributing anatomy row {missing[0]!r}")
    raw = np.sum([np.asarray(cams[r], dtype=np.float64) for r in rows], axis=0)
    return AgaMap(A.observation_tokens[k], normalize_map(raw), rows)


def normalize_map(raw: np.ndarray) -> np.ndarray:
    lo, hi = raw.min(), raw.max()
    if hi <= lo:
        return np.zeros_like(raw, dtype=np.float64)
    return (raw - lo) / (hi - lo)


def inference_map(S: int | tuple[int, int], observation_token: str = "") -> AgaMap:
    shape = (S, S) if isinstance(S, int) else tuple(S)
    return AgaMap(observation_token, np.zeros(shape), [])


# -- batched path -------------------------------------------------------------

def aggregate(cams: np.ndarray, pmask: np.ndarray) -> np.ndarray:
    """cams (B, S, S, J), pmask (B, J, K) -> raw maps (B, S, S, K)."""
    return np.einsum("bxyj,bjk->bxyk", cams, pmask.astype(np.float64))


@dataclass
class MinMaxCache:
    imin: np.ndarray  # (B, K) flat spatial index
    imax: np.ndarray
    span: np.ndarray  # (B, K); zero where degenerate
    H: np.ndarray     # (B, S, S, K)


def minmax_normalize(raw: np.ndarray) -> tuple[np.ndarray, MinMaxCache]:
    B, S1, S2, K = raw.shape
    flat = raw.reshape(B, S1 * S2, K)
    imin = flat.argmin(axis=1)
    imax = flat.argmax(axis=1)
    lo = np.take_along_axis(flat, imin[:, None, :], axis=1)[:, 0, :]
    hi = np.take_along_axis(flat, imax[:, None, :], axis=1)[:, 0, :]
    span = hi - lo
    ok = span > 0
    safe = np.where(ok, span, 1.0)
    H = np.where(ok[:, None, :], (flat - lo[:, None, :]) / safe[:, None, :], 0.0)
    H = H.reshape(raw.shape)
    return H, MinMaxCache(imin, imax, np.where(ok, span, 0.0), H)


def minmax_backward(dH: np.ndarray, cache: MinMaxCache) -> np.ndarray:
    B, S1, S2, K = dH.shape
    g = dH.reshape(B, S1 * S2, K)
    Hf = cache.H.reshape(B, S1 * S2, K)
    ok = cache.span > 0
    inv = np.where(ok, 1.0 / np.where(ok, cache.span, 1.0), 0.0)
    draw = g * inv[:, None, :]
    tot = (g * inv[:, None, :]).sum(axis=1)          # sum_s dH_s / D
    wtot = (g * Hf * inv[:, None, :]).sum(axis=1)    # sum_s dH_s H_s / D
    bi, ki = np.meshgrid(np.arange(B), np.arange(K), indexing="ij")
    np.add.at(draw, (bi, cache.imin, ki), -tot + wtot)
    np.add.at(draw, (bi, cache.imax, ki), -wtot)
    return draw.reshape(dH.shape)


def write_pgm(path: str | Path, heatmap: np.ndarray, binary: bool = True) -> None:
    """Write a heatmap as a portable graymap, min-max scaled to 0..255."""
    img = np.rint(normalize_map(np.asarray(heatmap, dtype=np.float64)) * 255).astype(np.uint8)
    h, w = img.shape
    path = Path(path)
    if binary:
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    else:
        body = "\n".join(" ".join(str(v) for v in row) for row in img)
        path.write_text(f"P2\n{w} {h}\n255\n{body}\n")


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic == b"P2":
        tok = data.split()
        w, h = int(tok[1]), int(tok[2])
        return np.array([int(t) for t in tok[4:4 + w * h]], dtype=np.uint8).reshape(h, w)
    if magic != b"P5":
        raise ValueError(f"{path}: not a PGM file")
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: bad PGM header")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data[m.end():m.end() + w * h], dtype=np.uint8).reshape(h, w)
