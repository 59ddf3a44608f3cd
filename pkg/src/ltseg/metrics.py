"""Confusion matrices, per-category Acc/IoU, FP/FN identities and bias estimation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .synthgen import GROUPS, IGNORE, CategoryGrouping, FrequencyProfile

EFFECTIVE_RATIO = 0.1


def confusion(pred: np.ndarray, gt: np.ndarray, c: int) -> np.ndarray:
    """``m[g, p]`` counts pixels with ground truth ``g`` predicted as ``p``; IGNORE ground truth is skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    valid = gt != IGNORE
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.max() >= c or p.max() >= c or p.min() < 0):
        raise ValueError(f"labels out of range for {c} categories")
    return np.bincount(g * c + p, minlength=c * c).reshape(c, c).astype(np.int64)


def tp_fp_fn(cm: np.ndarray):
    tp = np.diag(cm).astype(np.int64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return tp, fp, fn


def _safe_div(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros_like(a)
    np.divide(a, b, out=out, where=b > 0)
    return out


def pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    """Pearson correlation, or None when either vector is constant or too short."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        return None
    dx, dy = x - x.mean(), y - y.mean()
    den = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    if den == 0 or not np.isfinite(den):
        return None
    return float((dx * dy).sum() / den)


@dataclass
class MetricsReport:
    acc: np.ndarray
    iou: np.ndarray
    gt_count: np.ndarray
    pred_count: np.ndarray
    included: np.ndarray
    macc: float
    miou: float
    groups: dict[str, dict[str, float | None]]
    pearson_freq_acc: float | None
    confusion: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self, grouping: CategoryGrouping | None = None, profile: FrequencyProfile | None = None) -> dict:
        per = []
        for k in range(len(self.acc)):
            row = {
                "category": k,
                "acc": float(self.acc[k]),
                "iou": float(self.iou[k]),
                "gt_count": int(self.gt_count[k]),
                "pred_count": int(self.pred_count[k]),
                "included": bool(self.included[k]),
            }
            if grouping is not None:
                row["group"] = grouping.group_of[k]
                row["rank"] = grouping.order.index(k) + 1
            if profile is not None:
                row["frequency"] = float(profile.freqs[k])
            per.append(row)
        return {
            "per_category": per,
            "groups": self.groups,
            "overall": {"miou": self.miou, "macc": self.macc},
            "pearson": self.pearson_freq_acc,
            "confusion": self.confusion.tolist(),
            "diagnostics": self.diagnostics,
        }


def report(cm: np.ndarray, grouping: CategoryGrouping, profile: FrequencyProfile | None = None) -> MetricsReport:
    c = cm.shape[0]
    if grouping.c != c:
        raise ValueError(f"confusion matrix has {c} categories, grouping has {grouping.c}")
    tp, fp, fn = tp_fp_fn(cm)
    gt = tp + fn
    included = gt > 0
    acc = _safe_div(tp, gt)
    iou = _safe_div(tp, tp + fn + fp)

    def _mean(v, sel):
        return float(v[sel].mean()) if sel.any() else None

    groups = {}
    for g in GROUPS:
        sel = np.zeros(c, dtype=bool)
        sel[grouping.members(g)] = True
        sel &= included
        groups[g] = {"macc": _mean(acc, sel), "miou": _mean(iou, sel), "n": int(sel.sum())}

    diagnostics = {"excluded_categories": np.flatnonzero(~included).tolist()}
    corr = None
    if profile is not None:
        corr = pearson(profile.freqs[included], acc[included])
        if corr is None:
            diagnostics["pearson"] = "undefined (constant input)"
    return MetricsReport(
        acc=acc,
        iou=iou,
        gt_count=gt,
        pred_count=tp + fp,
        included=included,
        macc=_mean(acc, included) or 0.0,
        miou=_mean(iou, included) or 0.0,
        groups=groups,
        pearson_freq_acc=corr,
        confusion=cm,
        diagnostics=diagnostics,
    )


@dataclass
class IdentityResult:
    ok: bool
    sum_fp: int
    sum_fn: int
    max_abs_error: float
    violating_category: int | None = None


def identity_checks(cm: np.ndarray, tol: float = 1e-9) -> IdentityResult:
    """Sum FP == sum FN, and FP_i == (Acc_i / IoU_i - 1) * gt_i for every category with TP_i > 0."""
    tp, fp, fn = tp_fp_fn(cm)
    sfp, sfn = int(fp.sum()), int(fn.sum())
    if sfp != sfn:
        return IdentityResult(False, sfp, sfn, float("inf"))
    gt = tp + fn
    worst, bad = 0.0, None
    for i in np.flatnonzero(tp > 0):
        acc = tp[i] / gt[i]
        iou = tp[i] / (tp[i] + fn[i] + fp[i])
        err = abs((acc / iou - 1.0) * gt[i] - fp[i])
        if err > tol and bad is None:
            bad = int(i)
        worst = max(worst, err)
    return IdentityResult(bad is None, sfp, sfn, worst, bad)


@dataclass
class DeltaFpDiagnostic:
    p: np.ndarray
    predicted_delta_fp: np.ndarray
    actual_delta_fp: np.ndarray
    effectiveness_ratio: np.ndarray
    computable: np.ndarray

    def to_dict(self) -> dict:
        rows = []
        for k in range(len(self.p)):
            ok = bool(self.computable[k])
            rows.append(
                {
                    "category": k,
                    "computable": ok,
                    "p": float(self.p[k]) if ok else None,
                    "predicted_delta_fp": float(self.predicted_delta_fp[k]) if ok else None,
                    "actual_delta_fp": int(self.actual_delta_fp[k]),
                    "effectiveness_ratio": float(self.effectiveness_ratio[k]) if ok else None,
                    "effective": bool(ok and self.effectiveness_ratio[k] < EFFECTIVE_RATIO),
                }
            )
        return {"per_category": rows, "effective_threshold": EFFECTIVE_RATIO}


def delta_fp_diagnostic(cm_base: np.ndarray, cm_new: np.ndarray) -> DeltaFpDiagnostic:
    """Predicted false-positive growth ``p * (gt_i + FP_i)`` from a relative accuracy gain ``p``, vs. the actual change."""
    if cm_base.shape != cm_new.shape:
        raise ValueError(f"category sets differ: {cm_base.shape} vs {cm_new.shape}")
    tp0, fp0, fn0 = tp_fp_fn(cm_base)
    tp1, fp1, fn1 = tp_fp_fn(cm_new)
    gt0, gt1 = tp0 + fn0, tp1 + fn1
    acc0, acc1 = _safe_div(tp0, gt0), _safe_div(tp1, gt1)
    ok = acc0 > 0
    p = np.where(ok, _safe_div(acc1, np.where(ok, acc0, 1.0)) - 1.0, 0.0)
    predicted = p * (gt0 + fp0)
    ratio = _safe_div(predicted, gt0)
    return DeltaFpDiagnostic(p, predicted, (fp1 - fp0).astype(np.int64), ratio, ok)


def pixel_bias(prob: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Squared distance from each probability vector to its one-hot label, for non-IGNORE pixels."""
    valid = labels != IGNORE
    p = prob[valid]
    y = labels[valid].astype(np.int64)
    diff = p.copy()
    diff[np.arange(len(y)), y] -= 1.0
    return (diff * diff).sum(axis=-1)


def bias_estimate(
    predict: Sequence[Callable[[np.ndarray], np.ndarray]],
    features: np.ndarray,
    labels: np.ndarray,
    grouping: CategoryGrouping,
) -> dict:
    """Bias of the replica-averaged prediction.

    ``predict`` holds one callable per replica mapping a feature batch to a
    probability grid ``(..., c)``. The replica mean is compared to the one-hot
    label per pixel; results are averaged per category and per group.
    """
    if len(predict) < 2:
        raise ValueError("bias estimation needs at least two replicas")
    c = grouping.c
    sums = np.zeros(c)
    counts = np.zeros(c, dtype=np.int64)
    for i in range(len(features)):
        hbar = sum(f(features[i]) for f in predict) / len(predict)
        lab = labels[i]
        b = pixel_bias(hbar, lab)
        y = lab[lab != IGNORE].astype(np.int64)
        sums += np.bincount(y, weights=b, minlength=c)
        counts += np.bincount(y, minlength=c)
    per_cat = _safe_div(sums, counts)
    out = {"per_category": [float(v) if counts[k] else None for k, v in enumerate(per_cat)], "groups": {}}
    for g in GROUPS:
        members = [k for k in grouping.members(g) if counts[k]]
        out["groups"][g] = float(np.mean(per_cat[members])) if members else None
    return out


# ---------------------------------------------------------------------------
# CSV emitters


def confusion_csv(cm: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    c = cm.shape[0]
    w.writerow(["gt\\pred"] + list(range(c)))
    for k in range(c):
        w.writerow([k] + [int(v) for v in cm[k]])
    return buf.getvalue()


def plot_csv(rep: MetricsReport, grouping: CategoryGrouping, profile: FrequencyProfile) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", "rank", "frequency", "group", "acc", "iou"])
    for rank, k in enumerate(grouping.order, start=1):
        w.writerow([k, rank, repr(float(profile.freqs[k])), grouping.group_of[k], repr(float(rep.acc[k])), repr(float(rep.iou[k]))])
    return buf.getvalue()
