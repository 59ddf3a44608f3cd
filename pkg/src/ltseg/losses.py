"""Per-expert losses with analytic gradients w.r.t. logits.

All functions take logits of shape ``(..., c)`` and an integer label array of
shape ``(...)`` where ``IGNORE`` marks unlabeled pixels. Each returns a
:class:`LossBreakdown` whose ``grad`` has the shape of the logits.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .model import log_softmax, softmax
from .synthgen import IGNORE, FrequencyProfile

EPS = 1e-8
DEFAULT_ALPHA = 0.2


@dataclass
class LossBreakdown:
    l_ce: float
    l_aux_l2: float
    l_aux_kl: float
    total: float
    grad: np.ndarray

    @property
    def l_aux(self) -> float:
        return self.l_aux_l2 + self.l_aux_kl


def _check_labels(labels: np.ndarray, c: int) -> np.ndarray:
    labels = np.asarray(labels)
    bad = (labels != IGNORE) & (labels >= c)
    if bad.any():
        raise ValueError(f"label {int(labels[bad].max())} out of range for {c} categories")
    return labels


def _allowed_mask(c: int, allowed: Iterable[int] | None) -> np.ndarray:
    mask = np.zeros(c, dtype=bool)
    if allowed is None:
        mask[:] = True
    else:
        mask[list(allowed)] = True
    return mask


def _contributing(labels: np.ndarray, in_set: np.ndarray) -> np.ndarray:
    valid = labels != IGNORE
    contrib = np.zeros(labels.shape, dtype=bool)
    contrib[valid] = in_set[labels[valid]]
    return contrib


def marginal_targets(profile: FrequencyProfile, allowed: Iterable[int]) -> np.ndarray:
    """Dataset label marginal restricted to ``allowed``, floored at EPS; zeros outside the set."""
    mask = _allowed_mask(profile.c, allowed)
    q = np.where(mask, profile.counts.astype(np.float64), 0.0)
    q = q / q.sum()
    q = np.where(mask, np.maximum(q, EPS), 0.0)
    return q / q.sum()


def ce_loss(logits: np.ndarray, labels: np.ndarray, allowed: Iterable[int] | None = None) -> LossBreakdown:
    """Mean cross-entropy over pixels whose label lies in ``allowed``, softmax over all channels."""
    c = logits.shape[-1]
    labels = _check_labels(labels, c)
    contrib = _contributing(labels, _allowed_mask(c, allowed))
    n = int(contrib.sum())
    grad = np.zeros_like(logits, dtype=np.float64)
    if n == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, grad)
    z = logits[contrib]
    y = labels[contrib].astype(np.int64)
    logp = log_softmax(z)
    loss = -logp[np.arange(n), y].sum() / n
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    grad[contrib] = g / n
    return LossBreakdown(float(loss), 0.0, 0.0, float(loss), grad)


def aux_loss(logits: np.ndarray, labels: np.ndarray, allowed: Iterable[int], q: np.ndarray) -> LossBreakdown:
    """Interfering-channel suppression plus KL(p || q) over the allowed categories.

    The suppression term is the mean over all pixels of the summed squared
    logits of the categories outside ``allowed``. ``p`` is the mean full
    softmax over pixels labeled in ``allowed``, restricted to that set and
    renormalized; both ``p`` and ``q`` are floored at EPS before the log.
    """
    c = logits.shape[-1]
    labels = _check_labels(labels, c)
    in_set = _allowed_mask(c, allowed)
    out_set = ~in_set
    grad = np.zeros_like(logits, dtype=np.float64)

    zf = logits.reshape(-1, c)
    npix = zf.shape[0]
    l2 = 0.0
    if out_set.any() and npix:
        zi = zf[:, out_set]
        l2 = float((zi * zi).sum() / npix)
        grad[..., out_set] = 2.0 * logits[..., out_set] / npix

    kl = 0.0
    contrib = _contributing(labels, in_set)
    n = int(contrib.sum())
    if n:
        s = softmax(logits[contrib])
        pbar = s.mean(axis=0)
        T = pbar[in_set].sum()
        r = pbar[in_set] / T
        qs = np.maximum(np.asarray(q, dtype=np.float64)[in_set], EPS)
        rf = np.maximum(r, EPS)
        kl = float((rf * np.log(rf / qs)).sum())
        g_r = np.where(r > EPS, np.log(rf / qs) + 1.0, 0.0)
        g_pbar = np.zeros(c)
        g_pbar[in_set] = (g_r - (g_r * r).sum()) / T
        g_s = np.broadcast_to(g_pbar / n, s.shape)
        g_z = s * (g_s - (g_s * s).sum(axis=-1, keepdims=True))
        grad[contrib] += g_z
    return LossBreakdown(0.0, l2, kl, l2 + kl, grad)


def combined_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    allowed: Iterable[int],
    q: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
) -> LossBreakdown:
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    allowed = list(allowed)
    ce = ce_loss(logits, labels, allowed)
    if alpha == 0:
        return ce
    aux = aux_loss(logits, labels, allowed, q)
    total = ce.l_ce + alpha * (aux.l_aux_l2 + aux.l_aux_kl)
    return LossBreakdown(ce.l_ce, aux.l_aux_l2, aux.l_aux_kl, total, ce.grad + alpha * aux.grad)


def focal_loss(logits: np.ndarray, labels: np.ndarray, gamma: float = 2.0) -> LossBreakdown:
    """Mean of -(1 - p_t)^gamma log p_t over labeled pixels; gamma = 0 is plain cross-entropy."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    c = logits.shape[-1]
    labels = _check_labels(labels, c)
    contrib = labels != IGNORE
    n = int(contrib.sum())
    grad = np.zeros_like(logits, dtype=np.float64)
    if n == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, grad)
    z = logits[contrib]
    y = labels[contrib].astype(np.int64)
    logp = log_softmax(z)
    logpt = logp[np.arange(n), y]
    s = np.exp(logp)
    if gamma == 0:
        loss = -logpt.sum() / n
        g = s
        g[np.arange(n), y] -= 1.0
    else:
        pt = np.exp(logpt)
        om = 1.0 - pt
        w = om**gamma
        loss = -(w * logpt).sum() / n
        # d/dz_k = [(1-p)^g - g (1-p)^(g-1) p log p] (s_k - onehot_k)
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = np.where(om > 0, gamma * om ** (gamma - 1.0) * pt * logpt, 0.0)
        coef = w - extra
        g = s
        g[np.arange(n), y] -= 1.0
        g *= coef[:, None]
    grad[contrib] = g / n
    return LossBreakdown(float(loss), 0.0, 0.0, float(loss), grad)
