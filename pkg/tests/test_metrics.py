import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ltseg.metrics import (
    EFFECTIVE_RATIO,
    bias_estimate,
    confusion,
    confusion_csv,
    delta_fp_diagnostic,
    identity_checks,
    pearson,
    plot_csv,
    report,
    tp_fp_fn,
)
from ltseg.synthgen import IGNORE, ExplicitCounts, FrequencyProfile, make_grouping

CM = np.array([[8, 2], [1, 9]])


def grouping(c=3):
    counts = np.arange(c, 0, -1) * 10
    prof = FrequencyProfile(counts, counts / counts.sum(), int(counts.sum()))
    return make_grouping(prof, ExplicitCounts(1, c - 2, 1)), prof


def test_confusion_counts_and_ignore():
    gt = np.array([[0, 1, IGNORE], [2, 2, 1]])
    pred = np.array([[0, 2, 1], [2, 0, 1]])
    cm = confusion(pred, gt, 3)
    assert cm.tolist() == [[1, 0, 0], [0, 1, 1], [1, 0, 1]]
    assert cm.sum() == 5
    with pytest.raises(ValueError):
        confusion(pred[:, :2], gt, 3)


def test_two_category_hand_example():
    tp, fp, fn = tp_fp_fn(CM)
    assert (fp[0], fn[0]) == (1, 2)
    assert fp.sum() == fn.sum() == 3
    g, prof = grouping(3)
    cm = np.zeros((3, 3), dtype=np.int64)
    cm[:2, :2] = CM
    r = report(cm, g)
    assert r.acc[0] == pytest.approx(0.8)
    assert r.iou[0] == pytest.approx(8 / 11)
    assert r.macc == pytest.approx(0.85)  # category 2 is absent and excluded
    assert r.included.tolist() == [True, True, False]
    res = identity_checks(CM)
    assert res.ok and res.sum_fp == res.sum_fn == 3
    assert (0.8 / (8 / 11) - 1) * 10 == pytest.approx(1.0)


def test_perfect_prediction():
    g, prof = grouping(4)
    cm = np.diag([5, 3, 2, 7])
    r = report(cm, g, prof)
    assert r.macc == 1.0 and r.miou == 1.0
    assert identity_checks(cm).ok


def test_worked_appendix_point():
    # Acc = 0.85, IoU = 0.8 -> FP = 0.0625 * gt
    gt, tp = 1600, 1360
    fp = tp / 0.8 - tp - (gt - tp)
    assert fp == pytest.approx(0.0625 * gt)
    cm = np.array([[tp, gt - tp], [int(fp), 5000]])
    r = identity_checks(cm)
    assert r.ok and r.max_abs_error < 1e-9


@given(st.integers(2, 8), st.integers(0, 2**31))
def test_identities_on_random_matrices(c, seed):
    cm = np.random.default_rng(seed).integers(0, 50, (c, c))
    res = identity_checks(cm)
    assert res.ok, res
    g, prof = grouping(max(c, 3)) if c >= 3 else (None, None)
    if g is not None:
        r = report(cm, g, prof)
        assert (r.iou <= r.acc + 1e-15).all()
        assert ((0 <= r.acc) & (r.acc <= 1)).all()


def test_identity_violation_reports_first_category():
    # the identity is algebraically forced, so a negative tolerance is the only way to trip it
    bad = np.array([[3, 1], [0, 2]])
    assert identity_checks(bad).ok
    res = identity_checks(bad, tol=-1.0)
    assert not res.ok and res.violating_category == 0


def test_pearson():
    assert pearson(np.array([1, 2, 3.0]), np.array([2, 4, 6.0])) == pytest.approx(1.0)
    assert pearson(np.array([1, 2, 3.0]), np.array([0.5, 0.5, 0.5])) is None
    g, prof = grouping(3)
    r = report(np.diag([1, 1, 1]), g, prof)
    assert r.pearson_freq_acc is None and "pearson" in r.diagnostics


def test_delta_fp_identical_and_constructed():
    d = delta_fp_diagnostic(CM, CM)
    assert not d.p.any() and not d.predicted_delta_fp.any() and not d.actual_delta_fp.any()
    # category 0: gt 100, TP 50 -> 55 (Acc +10%); FP chosen so IoU stays 50/110 -> 55/121
    base = np.array([[50, 50], [10, 1000]])
    new = np.array([[55, 45], [21, 989]])
    d = delta_fp_diagnostic(base, new)
    assert d.p[0] == pytest.approx(0.1)
    assert abs(d.predicted_delta_fp[0] - d.actual_delta_fp[0]) <= 1
    out = d.to_dict()
    assert len(out["per_category"]) == 2 and out["effective_threshold"] == EFFECTIVE_RATIO
    zero = delta_fp_diagnostic(np.array([[0, 5], [0, 5]]), np.array([[1, 4], [0, 5]]))
    assert not zero.computable[0] and zero.to_dict()["per_category"][0]["p"] is None
    with pytest.raises(ValueError):
        delta_fp_diagnostic(CM, np.eye(3, dtype=int))


def test_bias_examples():
    g, _ = grouping(3)
    labels = np.array([[[0, 1, 2]]])
    onehot = lambda x: np.eye(3)[labels[0]]
    zero = bias_estimate([onehot, onehot, onehot], labels[..., None].astype(float), labels, g)
    assert max(v for v in zero["per_category"]) <= 1e-12
    a = lambda x: np.tile([1.0, 0, 0], (1, 3, 1))
    b = lambda x: np.tile([0, 1.0, 0], (1, 3, 1))
    res = bias_estimate([a, b], labels[..., None].astype(float), labels, g)
    assert res["per_category"][0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        bias_estimate([a], labels, labels, g)


@given(st.integers(0, 2**31))
def test_bias_bounded(seed):
    rng = np.random.default_rng(seed)
    g, _ = grouping(4)
    labels = rng.integers(0, 4, (2, 3, 3))
    preds = [lambda x, p=rng.dirichlet(np.ones(4) * 0.3, (3, 3)): p for _ in range(3)]
    res = bias_estimate(preds, np.zeros((2, 3, 3, 1)), labels, g)
    vals = [v for v in res["per_category"] if v is not None]
    assert all(0 <= v <= 2 for v in vals)


def test_csv_emitters():
    g, prof = grouping(3)
    cm = np.array([[5, 1, 0], [0, 3, 1], [1, 0, 2]])
    lines = confusion_csv(cm).splitlines()
    assert lines[0] == "gt\\pred,0,1,2" and lines[1] == "0,5,1,0"
    rows = plot_csv(report(cm, g, prof), g, prof).splitlines()
    assert rows[0] == "category,rank,frequency,group,acc,iou" and len(rows) == 4


def test_report_dict_keys():
    g, prof = grouping(3)
    d = report(np.diag([2, 3, 4]), g, prof).to_dict(g, prof)
    assert set(d) >= {"per_category", "groups", "overall", "pearson", "diagnostics", "confusion"}
    assert set(d["groups"]) == {"head", "body", "tail"}
    assert set(d["overall"]) == {"miou", "macc"}
