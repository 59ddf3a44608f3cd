"""Shared backbone, per-expert context modules and classifier heads.

Everything works on arrays with arbitrary leading batch axes: a single scene
is ``(H, W, D)``, a minibatch ``(B, H, W, D)``. Arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from scipy import ndimage


@dataclass
class BackboneParams:
    W1: np.ndarray  # (F1, D)
    b1: np.ndarray  # (F1,)

    @property
    def F1(self) -> int:
        return self.W1.shape[0]

    @property
    def D(self) -> int:
        return self.W1.shape[1]

    def copy(self) -> "BackboneParams":
        return BackboneParams(self.W1.copy(), self.b1.copy())


@dataclass
class ExpertParams:
    Wc: np.ndarray  # (F2, 2*F1) context module
    bc: np.ndarray  # (F2,)
    Wh: np.ndarray  # (c, F2) classifier head
    bh: np.ndarray  # (c,)
    radius: int = 2

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"window radius must be >= 1, got {self.radius}")

    @property
    def c(self) -> int:
        return self.Wh.shape[0]

    def copy(self) -> "ExpertParams":
        return ExpertParams(self.Wc.copy(), self.bc.copy(), self.Wh.copy(), self.bh.copy(), self.radius)


@dataclass(frozen=True)
class ModelDims:
    D: int = 8
    F1: int = 16
    F2: int = 16
    c: int = 12
    K: int = 3
    radius: int = 2


PARAM_NAMES = {
    "backbone": ("W1", "b1"),
    "expert": ("Wc", "bc", "Wh", "bh"),
}


def _features(x) -> np.ndarray:
    x = getattr(x, "features", x)
    return np.asarray(x, dtype=np.float64)


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_out, fan_in))


def init_params(seed: int, dims: ModelDims) -> tuple[BackboneParams, list[ExpertParams]]:
    """Glorot-uniform weights, zero biases; backbone and each expert use their own substream."""
    if min(dims.D, dims.F1, dims.F2, dims.c, dims.K) <= 0:
        raise ValueError(f"invalid model dims {dims}")
    streams = np.random.SeedSequence(seed).spawn(dims.K + 1)
    rng = np.random.default_rng(streams[0])
    backbone = BackboneParams(_glorot(rng, dims.F1, dims.D), np.zeros(dims.F1))
    experts = []
    for ss in streams[1:]:
        rng = np.random.default_rng(ss)
        Wc = _glorot(rng, dims.F2, 2 * dims.F1)
        Wh = _glorot(rng, dims.c, dims.F2)
        experts.append(ExpertParams(Wc, np.zeros(dims.F2), Wh, np.zeros(dims.c), dims.radius))
    return backbone, experts


# ---------------------------------------------------------------------------
# window mean with clamp-to-edge padding


def window_mean(feat: np.ndarray, r: int) -> np.ndarray:
    """Mean over the (2r+1)^2 window around each pixel; out-of-grid taps read the nearest edge pixel."""
    n = 2 * r + 1
    size = (1,) * (feat.ndim - 3) + (n, n, 1)
    return ndimage.uniform_filter(np.asarray(feat, dtype=np.float64), size=size, mode="nearest")


def window_mean_backward(grad: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of :func:`window_mean`."""
    H, W = grad.shape[-3], grad.shape[-2]
    n = 2 * r + 1
    lead = grad.ndim - 3
    pad = [(0, 0)] * lead + [(r, r), (r, r), (0, 0)]
    size = (1,) * lead + (n, n, 1)
    # gradient w.r.t. every position of the edge-padded grid
    gp = ndimage.uniform_filter(np.pad(grad, pad), size=size, mode="constant")
    # fold padded borders back onto the edge rows/columns they replicate
    gp[..., r, :, :] += gp[..., :r, :, :].sum(axis=-3)
    gp[..., H + r - 1, :, :] += gp[..., H + r :, :, :].sum(axis=-3)
    gp = gp[..., r : H + r, :, :]
    gp[..., :, r, :] += gp[..., :, :r, :].sum(axis=-2)
    gp[..., :, W + r - 1, :] += gp[..., :, W + r :, :].sum(axis=-2)
    return gp[..., :, r : W + r, :]


# ---------------------------------------------------------------------------
# forward


def backbone_forward(params: BackboneParams, sample) -> np.ndarray:
    x = _features(sample)
    if x.shape[-1] != params.D:
        raise ValueError(f"feature dim {x.shape[-1]} does not match backbone input dim {params.D}")
    return np.maximum(x @ params.W1.T + params.b1, 0.0)


def context_forward(params: ExpertParams, feat: np.ndarray) -> np.ndarray:
    if params.Wc.shape[1] != 2 * feat.shape[-1]:
        raise ValueError(f"context module expects {params.Wc.shape[1] // 2} input channels, got {feat.shape[-1]}")
    m = window_mean(feat, params.radius)
    u = np.concatenate([feat, m], axis=-1)
    return np.maximum(u @ params.Wc.T + params.bc, 0.0)


def head_forward(params: ExpertParams, ctx: np.ndarray) -> np.ndarray:
    return ctx @ params.Wh.T + params.bh


def expert_forward(backbone: BackboneParams, expert: ExpertParams, sample) -> np.ndarray:
    """Logits over all c categories for every pixel."""
    return head_forward(expert, context_forward(expert, backbone_forward(backbone, sample)))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    s = z - z.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# forward with caches, and backward


@dataclass
class BackboneCache:
    x: np.ndarray
    h: np.ndarray


@dataclass
class ExpertCache:
    h: np.ndarray
    u: np.ndarray
    g: np.ndarray


def backbone_forward_cached(params: BackboneParams, x: np.ndarray) -> tuple[np.ndarray, BackboneCache]:
    x = _features(x)
    h = backbone_forward(params, x)
    return h, BackboneCache(x, h)


def expert_forward_cached(expert: ExpertParams, h: np.ndarray, m: np.ndarray | None = None) -> tuple[np.ndarray, ExpertCache]:
    """Logits plus the activations needed by :func:`expert_backward`; ``m`` may carry a precomputed window mean of ``h``."""
    if m is None:
        m = window_mean(h, expert.radius)
    u = np.concatenate([h, m], axis=-1)
    g = np.maximum(u @ expert.Wc.T + expert.bc, 0.0)
    z = g @ expert.Wh.T + expert.bh
    return z, ExpertCache(h, u, g)


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def expert_backward(expert: ExpertParams, cache: ExpertCache, dz: np.ndarray, need_dh: bool = True, split: bool = False):
    """Gradients of the expert parameters (same field names) and, optionally, of the backbone output.

    With ``split=True`` the second value is ``(d_direct, d_window_mean)`` so callers
    summing over experts can run the window adjoint once.
    """
    F1 = cache.h.shape[-1]
    dzf, gf = _flat(dz), _flat(cache.g)
    grads = {"Wh": dzf.T @ gf, "bh": dzf.sum(axis=0)}
    dg = dz @ expert.Wh
    dpre = np.where(cache.g > 0.0, dg, 0.0)
    dpf = _flat(dpre)
    grads["Wc"] = dpf.T @ _flat(cache.u)
    grads["bc"] = dpf.sum(axis=0)
    dh = None
    if need_dh:
        du = dpre @ expert.Wc
        if split:
            return grads, (du[..., :F1], du[..., F1:])
        dh = du[..., :F1] + window_mean_backward(du[..., F1:], expert.radius)
    return grads, dh


def backbone_backward(params: BackboneParams, cache: BackboneCache, dh: np.ndarray) -> dict[str, np.ndarray]:
    dpre = np.where(cache.h > 0.0, dh, 0.0)
    dpf = _flat(dpre)
    return {"W1": dpf.T @ _flat(cache.x), "b1": dpf.sum(axis=0)}


def apply_update(params, grads: dict[str, np.ndarray], lr: float) -> None:
    """In-place SGD step on the named arrays of a parameter dataclass."""
    for name, g in grads.items():
        arr = getattr(params, name)
        arr -= lr * g


def param_arrays(params) -> list[tuple[str, np.ndarray]]:
    return [(f.name, getattr(params, f.name)) for f in fields(params) if isinstance(getattr(params, f.name), np.ndarray)]


def tie_context(experts: list[ExpertParams]) -> list[ExpertParams]:
    """Copies of ``experts`` whose context modules equal the first expert's (shared-context variant)."""
    first = experts[0]
    return [replace(e.copy(), Wc=first.Wc.copy(), bc=first.bc.copy()) for e in experts]
