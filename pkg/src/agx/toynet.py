"""Two-branch toy classifier with exact reverse-mode gradients.

Both encoders are stacks of 3x3 / stride-2 / pad-1 convolutions with ReLU,
producing feature maps laid out (B, S, S, C). Classifier heads are bias-free
weight vectors applied to the global-average-pooled features, so a head's CAM
averages to its logit.

Tensors are float64 numpy arrays. The forward pass records everything the
backward pass needs in a `Graph`; `backward` walks it in reverse, including the
observation loss's path back into the anatomy branch through the attention map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import aga

EPS = 1e-12
CKPT_MAGIC = b"AGXCKPT1"


class ModelParams(dict):
    """Ordered mapping of parameter name -> float64 array."""

    @property
    def anatomy_heads(self) -> np.ndarray:
        return self["anat.heads"]

    @property
    def observation_heads(self) -> np.ndarray:
        return self["obs.heads"]

    def n_layers(self, branch: str) -> int:
        return sum(1 for k in self if k.startswith(f"{branch}.conv") and k.endswith(".weight"))

    def copy(self) -> "ModelParams":
        return ModelParams((k, v.copy()) for k, v in self.items())


def init_params(seed: int, n_anat: int, n_obs: int, channels: int = 8,
                n_layers: int = 3, in_channels: int = 1) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for branch, n_heads in (("anat", n_anat), ("obs", n_obs)):
        cin = in_channels
        for i in range(n_layers):
            std = np.sqrt(2.0 / (9 * cin))
            params[f"{branch}.conv{i}.weight"] = rng.normal(0.0, std, (3, 3, cin, channels))
            params[f"{branch}.conv{i}.bias"] = np.zeros(channels)
            cin = channels
        params[f"{branch}.heads"] = rng.normal(0.0, 1.0 / np.sqrt(channels), (n_heads, channels))
    return params


# -- primitives ---------------------------------------------------------------

def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _out_size(n: int) -> int:
    return (n - 1) // 2 + 1


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 2, zero padding 1. x: (B, H, W, Cin)."""
    B, H, W, _ = x.shape
    Ho, Wo = _out_size(H), _out_size(W)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(b, (B, Ho, Wo, w.shape[-1])).copy()
    for di in range(3):
        for dj in range(3):
            out += xp[:, di:di + 2 * Ho - 1:2, dj:dj + 2 * Wo - 1:2, :] @ w[di, dj]
    return out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    B, H, W, _ = x.shape
    Ho, Wo = dout.shape[1:3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for di in range(3):
        for dj in range(3):
            sl = (slice(None), slice(di, di + 2 * Ho - 1, 2), slice(dj, dj + 2 * Wo - 1, 2))
            dw[di, dj] = np.tensordot(xp[sl], dout, axes=([0, 1, 2], [0, 1, 2]))
            dxp[sl] += dout @ w[di, dj].T
    return dxp[:, 1:-1, 1:-1, :], dw, dout.sum(axis=(0, 1, 2))


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected image(s) shaped (H, W) or (B, H, W), got {x.shape}")
    return x[..., None]


def encode(x: np.ndarray, params: Mapping[str, np.ndarray], branch: str):
    """Returns the feature map and the per-layer inputs/pre-activations."""
    acts, pres = [], []
    h = x
    i = 0
    while f"{branch}.conv{i}.weight" in params:
        w, b = params[f"{branch}.conv{i}.weight"], params[f"{branch}.conv{i}.bias"]
        if h.shape[-1] != w.shape[2]:
            raise ValueError(f"{branch}.conv{i}: input has {h.shape[-1]} channels, weight expects {w.shape[2]}")
        acts.append(h)
        z = conv2d(h, w, b)
        pres.append(z)
        h = np.maximum(z, 0.0)
        i += 1
    return h, acts, pres


def encode_backward(df, acts, pres, params, branch, grads):
    for i in reversed(range(len(acts))):
        dz = df * (pres[i] > 0)
        df, dw, db = conv2d_backward(dz, acts[i], params[f"{branch}.conv{i}.weight"])
        grads[f"{branch}.conv{i}.weight"] = dw
        grads[f"{branch}.conv{i}.bias"] = db


def gap(f: np.ndarray) -> np.ndarray:
    return f.mean(axis=(1, 2))


def compute_cam(f: np.ndarray, w: np.ndarray) -> np.ndarray:
    """CAM(s) = sum_c w[c] f(s, c). ``w`` is (C,) or (L, C); trailing axis of the result is L."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != f.shape[-1]:
        raise ValueError(f"head length {w.shape[-1]} != channel count {f.shape[-1]}")
    return f @ w if w.ndim == 1 else f @ w.T


# -- forward ops ---------------------------------------------------------------

def forward_anatomy(x, params: Mapping[str, np.ndarray]):
    """Returns (f_a, probs). f_a is (B, S, S, C); probs is (B, N_a)."""
    f_a, _, _ = encode(_as_batch(x), params, "anat")
    return f_a, sigmoid(gap(f_a) @ params["anat.heads"].T)


def forward_observation(x, H, beta: float, params: Mapping[str, np.ndarray]):
    """Residual attention: f' = (1 + beta * H) * f_o, then per-label GAP heads.

    ``H`` may be (S, S) or (B, S, S), shared by every observation label, or
    (B, S, S, K) with one map per label. Returns (f_o, f_prime, probs); f_prime
    is (B, S, S, C) for a shared map and (B, K, S, S, C) otherwise.
    """
    f_o, _, _ = encode(_as_batch(x), params, "obs")
    H = np.asarray(H, dtype=np.float64)
    W = params["obs.heads"]
    if H.ndim == 4:
        if H.shape[:3] != f_o.shape[:3] or H.shape[3] != W.shape[0]:
            raise ValueError(f"attention maps {H.shape} do not match features {f_o.shape}")
        M = 1.0 + beta * H
        f_prime = np.moveaxis(M, 3, 1)[..., None] * f_o[:, None]
        logits = (M * compute_cam(f_o, W)).mean(axis=(1, 2))
        return f_o, f_prime, sigmoid(logits)
    if H.shape[-2:] != f_o.shape[1:3]:
        raise ValueError(f"attention map {H.shape} does not match feature map {f_o.shape[1:3]}")
    if H.ndim == 2:
        H = H[None]
    f_prime = (1.0 + beta * H)[..., None] * f_o
    return f_o, f_prime, sigmoid(gap(f_prime) @ W.T)


# -- losses ----------------------------------------------------------------------

@dataclass
class LossWeights:
    b_plus: np.ndarray | float
    b_minus: np.ndarray | float

    @classmethod
    def balanced(cls, labels: np.ndarray, mask: np.ndarray | None = None) -> "LossWeights":
        """b+ = |N| / (|P| + |N|), b- = |P| / (|P| + |N|) per label column.

        Unlabeled (-1) counts toward N, matching the loss's negative set.
        Columns with no positives or no negatives get b+ = b- = 1.
        """
        labels = np.asarray(labels)
        m = np.ones(labels.shape) if mask is None else np.asarray(mask, dtype=np.float64)
        n_pos = ((labels == 1) * m).sum(axis=0)
        n_neg = ((labels != 1) * m).sum(axis=0)
        total = n_pos + n_neg
        ok = (n_pos > 0) & (n_neg > 0)
        safe = np.where(ok, total, 1.0)
        b_plus, b_minus = np.where(ok, n_neg / safe, 1.0), np.where(ok, n_pos / safe, 1.0)
        if labels.ndim == 1:
            return cls(float(b_plus), float(b_minus))
        return cls(b_plus, b_minus)


def weighted_bce(probs, labels, weights: LossWeights, mask=None):
    """-b+ sum_{y=1} ln p - b- sum_{y in {0,u}} ln(1 - p).

    Works column-wise on (n, L) inputs and returns one loss per label; 1-D
    inputs give a scalar. Probabilities are clamped to [1e-12, 1 - 1e-12].
    """
    p = np.clip(np.asarray(probs, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(labels)
    m = 1.0 if mask is None else np.asarray(mask, dtype=np.float64)
    pos = (y == 1)
    terms = np.where(pos, -weights.b_plus * np.log(p), -weights.b_minus * np.log1p(-p)) * m
    out = terms.sum(axis=0)
    return float(out) if np.ndim(out) == 0 else out


def _bce_logit_grad(p, y, weights: LossWeights, mask):
    inside = (p > EPS) & (p < 1.0 - EPS)
    g = np.where(y == 1, -weights.b_plus * (1.0 - p), weights.b_minus * p)
    return g * inside * mask


def joint_loss(anat_losses, obs_losses) -> float:
    anat_losses, obs_losses = np.asarray(anat_losses, float), np.asarray(obs_losses, float)
    if anat_losses.size == 0 or obs_losses.size == 0:
        raise ValueError("joint_loss needs at least one anatomy and one observation loss")
    return float(anat_losses.mean() + obs_losses.mean())


# -- joint forward / backward --------------------------------------------------

@dataclass
class Graph:
    """Forward record of one joint-loss evaluation."""
    params: Mapping[str, np.ndarray]
    beta: float
    aga_enabled: bool
    pmask: np.ndarray
    anat_trace: tuple
    obs_trace: tuple
    f_a: np.ndarray
    f_o: np.ndarray
    cam_o: np.ndarray
    M: np.ndarray
    mm_cache: aga.MinMaxCache | None
    dz_a: np.ndarray
    dz_o: np.ndarray
    anat_losses: np.ndarray
    obs_losses: np.ndarray
    loss: float
    anat_probs: np.ndarray = field(repr=False)
    obs_probs: np.ndarray = field(repr=False)


def forward_joint(params, x, anat_y, obs_y, pmask, anat_w: LossWeights, obs_w: LossWeights,
                  beta: float, aga_enabled: bool = True, obs_mask=None) -> Graph:
    """Joint loss over a batch: per-label weighted BCE summed over samples.

    anat_y (B, N_a) in {0, 1}; obs_y (B, N_o) in {1, 0, -1}; pmask (B, N_a, N_o)
    marks report cells equal to P, which select the CAMs feeding each attention map.
    """
    x = _as_batch(x)
    Wa, Wo = params["anat.heads"], params["obs.heads"]
    f_a, a_acts, a_pres = encode(x, params, "anat")
    f_o, o_acts, o_pres = encode(x, params, "obs")

    p_a = sigmoid(gap(f_a) @ Wa.T)
    cam_o = compute_cam(f_o, Wo)
    mm_cache = None
    if aga_enabled:
        raw = aga.aggregate(compute_cam(f_a, Wa), pmask)
        H, mm_cache = aga.minmax_normalize(raw)
        M = 1.0 + beta * H
    else:
        M = np.ones_like(cam_o)
    p_o = sigmoid((M * cam_o).mean(axis=(1, 2)))

    a_mask = np.ones_like(p_a)
    o_mask = np.ones_like(p_o) if obs_mask is None else np.asarray(obs_mask, dtype=np.float64)
    la = np.atleast_1d(weighted_bce(p_a, anat_y, anat_w, a_mask))
    lo = np.atleast_1d(weighted_bce(p_o, obs_y, obs_w, o_mask))
    loss = joint_loss(la, lo)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite joint loss {loss}")

    dz_a = _bce_logit_grad(p_a, anat_y, anat_w, a_mask) / len(la)
    dz_o = _bce_logit_grad(p_o, obs_y, obs_w, o_mask) / len(lo)
    return Graph(params, beta, aga_enabled, np.asarray(pmask), (a_acts, a_pres), (o_acts, o_pres),
                 f_a, f_o, cam_o, M, mm_cache, dz_a, dz_o, la, lo, loss, p_a, p_o)


def backward(graph: Graph, which: str = "joint") -> dict[str, np.ndarray]:
    """Gradients of the joint loss (or just its 'anatomy' / 'observation' half)."""
    if which not in ("joint", "anatomy", "observation"):
        raise ValueError(f"unknown loss part {which!r}")
    params = graph.params
    Wa, Wo = params["anat.heads"], params["obs.heads"]
    f_a, f_o = graph.f_a, graph.f_o
    area = f_a.shape[1] * f_a.shape[2]
    dz_a = graph.dz_a if which != "observation" else np.zeros_like(graph.dz_a)
    dz_o = graph.dz_o if which != "anatomy" else np.zeros_like(graph.dz_o)
    grads: dict[str, np.ndarray] = {}

    # observation head over the attended features
    dcam_o = dz_o[:, None, None, :] * graph.M / area
    grads["obs.heads"] = np.einsum("bxyk,bxyc->kc", dcam_o, f_o)
    df_o = dcam_o @ Wo

    # anatomy head
    dWa = dz_a.T @ gap(f_a)
    df_a = np.broadcast_to((dz_a @ Wa)[:, None, None, :] / area, f_a.shape).copy()

    # attention feedback into the anatomy branch
    if graph.aga_enabled:
        dH = graph.beta * dz_o[:, None, None, :] * graph.cam_o / area
        draw = aga.minmax_backward(dH, graph.mm_cache)
        dcam_a = np.einsum("bxyk,bjk->bxyj", draw, graph.pmask.astype(np.float64))
        dWa += np.einsum("bxyj,bxyc->jc", dcam_a, f_a)
        df_a += dcam_a @ Wa
    grads["anat.heads"] = dWa

    encode_backward(df_a, *graph.anat_trace, params, "anat", grads)
    encode_backward(df_o, *graph.obs_trace, params, "obs", grads)
    return {k: grads[k] for k in params}


# -- optimizer -------------------------------------------------------------------

def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float,
             momentum: float = 0.9, weight_decay: float = 1e-4, velocity: dict | None = None):
    """Classic momentum SGD with L2 decay folded into the gradient.

    v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v.
    Returns (new_params, velocity); ``velocity`` is updated in place when given.
    """
    if velocity is None:
        velocity = {}
    new = ModelParams()
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        d = g + weight_decay * w if weight_decay else g
        v = velocity.get(name)
        v = d.copy() if v is None else momentum * v + d
        velocity[name] = v
        new[name] = w - lr * v
    return new, velocity


# -- checkpoints -------------------------------------------------------------------

def checkpoint_bytes(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def params_from_bytes(data: bytes) -> ModelParams:
    if data[:8] != CKPT_MAGIC:
        raise ValueError("not an AGXCKPT1 checkpoint")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    params = ModelParams()
    for _ in range(count):
        (n,) = take("<I")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64)) * 8
        if pos + size > len(data):
            raise ValueError(f"truncated checkpoint while reading {name!r}")
        params[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(dims).copy()
        pos += size
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes after checkpoint payload")
    return params


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(arrays))


def load_checkpoint(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
