"""Combining expert outputs: learned per-category calibration, the ground-truth oracle, and fixed aggregation rules."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import softmax
from .synthgen import IGNORE, CategoryGrouping

SOFTMAX_THRESHOLD = 0.3
BASELINE_METHODS = ("softmax", "argmax", "group-avg")


@dataclass
class CalibrationParams:
    w: np.ndarray  # (K, c)
    beta: np.ndarray  # (K, c)

    def __post_init__(self):
        if self.w.shape != self.beta.shape or self.w.ndim != 2:
            raise ValueError(f"calibration shapes differ: w {self.w.shape}, beta {self.beta.shape}")

    @classmethod
    def identity(cls, K: int, c: int) -> "CalibrationParams":
        return cls(np.ones((K, c)), np.zeros((K, c)))

    @property
    def K(self) -> int:
        return self.w.shape[0]

    def copy(self) -> "CalibrationParams":
        return CalibrationParams(self.w.copy(), self.beta.copy())


def calibrate(p: np.ndarray, calib: CalibrationParams, i: int) -> np.ndarray:
    """softmax over categories of ``w_i * p + beta_i``."""
    if p.shape[-1] != calib.w.shape[1]:
        raise ValueError(f"probabilities have {p.shape[-1]} categories, calibration has {calib.w.shape[1]}")
    return softmax(calib.w[i] * p + calib.beta[i])


def moe_combine(expert_probs: Sequence[np.ndarray], calib: CalibrationParams) -> np.ndarray:
    if len(expert_probs) != calib.K:
        raise ValueError(f"{len(expert_probs)} expert outputs for {calib.K} calibrated experts")
    out = calibrate(expert_probs[0], calib, 0)
    for i in range(1, len(expert_probs)):
        out = out + calibrate(expert_probs[i], calib, i)
    return out / len(expert_probs)


def select_loss(expert_probs: Sequence[np.ndarray], labels: np.ndarray, calib: CalibrationParams, reduction: str = "sum"):
    """CE of the calibrated ensemble against the labels, with gradients for ``w`` and ``beta``.

    Returns ``(loss, grad_w, grad_beta)``. IGNORE pixels do not contribute.
    ``reduction`` is ``"sum"`` over pixels or ``"mean"``.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    K, c = calib.w.shape
    valid = labels != IGNORE
    n = int(valid.sum())
    gw, gb = np.zeros((K, c)), np.zeros((K, c))
    if n == 0:
        return 0.0, gw, gb
    y = labels[valid].astype(np.int64)
    ps = [np.asarray(p)[valid] for p in expert_probs]
    shat = [softmax(calib.w[i] * ps[i] + calib.beta[i]) for i in range(K)]
    pfinal = sum(shat) / K
    py = pfinal[np.arange(n), y]
    norm = n if reduction == "mean" else 1
    loss = float(-np.log(py).sum() / norm)
    # dL/dpfinal is -1/(norm p_y) on the true class only
    gy = -1.0 / (norm * K * py)
    for i in range(K):
        s = shat[i]
        sy = s[np.arange(n), y]
        # softmax Jacobian applied to a one-hot upstream vector
        ga = -s * (gy * sy)[:, None]
        ga[np.arange(n), y] += gy * sy
        gw[i] = (ga * ps[i]).sum(axis=0)
        gb[i] = ga.sum(axis=0)
    return loss, gw, gb


def expert_selection(labels: np.ndarray, grouping: CategoryGrouping) -> np.ndarray:
    """Index of the most specialized expert whose label set contains each pixel's label."""
    K = grouping.K
    sel = np.zeros(labels.shape, dtype=np.int64)
    valid = labels != IGNORE
    lab = labels[valid]
    choice = np.full(lab.shape, -1, dtype=np.int64)
    for n in range(K):
        in_n = np.isin(lab, list(grouping.expert_sets[n]))
        in_next = np.isin(lab, list(grouping.expert_sets[n + 1])) if n + 1 < K else np.zeros_like(in_n)
        choice[in_n & ~in_next] = n
    if (choice < 0).any():
        bad = int(lab[choice < 0][0])
        raise ValueError(f"label {bad} is not covered by any expert label set")
    sel[valid] = choice
    return sel


def oracle_combine(expert_probs: Sequence[np.ndarray], labels: np.ndarray, grouping: CategoryGrouping) -> np.ndarray:
    """Per pixel, the output of the expert dominating its ground-truth category (expert 1 on IGNORE)."""
    if len(expert_probs) != grouping.K:
        raise ValueError(f"{len(expert_probs)} expert outputs for {grouping.K} expert label sets")
    sel = expert_selection(labels, grouping)
    stacked = np.stack(expert_probs)
    return np.take_along_axis(stacked, sel[None, ..., None], axis=0)[0]


def _one_hot(pred: np.ndarray, c: int) -> np.ndarray:
    return np.eye(c)[pred]


def aggregate_baseline(
    expert_probs: Sequence[np.ndarray],
    method: str,
    grouping: CategoryGrouping | None = None,
    threshold: float = SOFTMAX_THRESHOLD,
) -> np.ndarray:
    """Fixed aggregation rules.

    ``softmax`` and ``argmax`` return a label grid; ``group-avg`` returns
    probabilities. ``softmax`` scans the most specialized expert first and
    takes the first category above ``threshold``, falling back to expert 1's
    argmax.
    """
    K = len(expert_probs)
    if method == "softmax":
        out = np.argmax(expert_probs[0], axis=-1)
        decided = np.zeros(out.shape, dtype=bool)
        for i in range(K - 1, -1, -1):
            p = expert_probs[i]
            cat = np.argmax(p, axis=-1)
            hit = (np.take_along_axis(p, cat[..., None], axis=-1)[..., 0] > threshold) & ~decided
            out[hit] = cat[hit]
            decided |= hit
        return out
    if method == "argmax":
        stacked = np.stack(expert_probs)  # (K, ..., c)
        conf = stacked.max(axis=-1)
        best = np.argmax(conf, axis=0)
        cats = np.argmax(stacked, axis=-1)
        return np.take_along_axis(cats, best[None], axis=0)[0]
    if method == "group-avg":
        if grouping is None:
            raise ValueError("group-avg needs the expert label sets")
        c = expert_probs[0].shape[-1]
        num = np.zeros_like(expert_probs[0], dtype=np.float64)
        cnt = np.zeros(c)
        for i in range(K):
            m = np.zeros(c)
            m[list(grouping.expert_sets[i])] = 1.0
            num += expert_probs[i] * m
            cnt += m
        avg = num / np.maximum(cnt, 1.0)
        return avg / avg.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown aggregation method {method!r}; expected one of {BASELINE_METHODS}")


def as_probabilities(out: np.ndarray, c: int) -> np.ndarray:
    """Label grids become one-hot probability grids; probability grids pass through."""
    if out.ndim >= 1 and out.shape[-1] == c and np.issubdtype(out.dtype, np.floating):
        return out
    return _one_hot(out, c)


# ---------------------------------------------------------------------------
# MEDP probability dump

_MEDP = struct.Struct("<4sIIIIII")


def save_probabilities(path: str | Path, probs: np.ndarray) -> None:
    """``probs`` is (n_scenes, K, H, W, c)."""
    n, K, H, W, c = probs.shape
    with open(path, "wb") as f:
        f.write(_MEDP.pack(b"MEDP", 1, n, K, H, W, c))
        f.write(np.ascontiguousarray(probs, dtype="<f4").tobytes())


def load_probabilities(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _MEDP.size:
        raise ValueError(f"{path}: truncated probability dump")
    magic, version, n, K, H, W, c = _MEDP.unpack(raw[: _MEDP.size])
    if magic != b"MEDP" or version != 1:
        raise ValueError(f"{path}: not a version-1 probability dump")
    count = n * K * H * W * c
    if len(raw) != _MEDP.size + 4 * count:
        raise ValueError(f"{path}: size does not match header")
    return np.frombuffer(raw, dtype="<f4", offset=_MEDP.size).reshape(n, K, H, W, c).astype(np.float64)
