import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, rel_error
from ltseg.ensemble import (
    CalibrationParams,
    aggregate_baseline,
    as_probabilities,
    calibrate,
    expert_selection,
    load_probabilities,
    moe_combine,
    oracle_combine,
    save_probabilities,
    select_loss,
)
from ltseg.model import softmax
from ltseg.synthgen import IGNORE, ExplicitCounts, FrequencyProfile, make_grouping

C, K = 6, 3


def grouping():
    counts = np.array([60, 50, 20, 15, 5, 3])
    return make_grouping(FrequencyProfile(counts, counts / counts.sum(), int(counts.sum())), ExplicitCounts(2, 2, 2))


def rand_probs(rng, shape=(4, 5), k=K):
    return [softmax(rng.normal(size=shape + (C,)) * 2) for _ in range(k)]


def rand_calib(rng, k=K):
    return CalibrationParams(1 + rng.normal(size=(k, C)), rng.normal(size=(k, C)))


def test_calibrate_worked_example():
    calib = CalibrationParams.identity(1, 3)
    out = calibrate(np.array([0.7, 0.2, 0.1]), calib, 0)
    np.testing.assert_allclose(out, [0.4640, 0.2814, 0.2546], atol=1e-3)
    # the same vector from the defining formula
    e = np.exp([0.7, 0.2, 0.1])
    np.testing.assert_allclose(out, e / e.sum(), atol=1e-15)


def test_calibrate_suppression_limit():
    calib = CalibrationParams.identity(1, 3)
    calib.beta[0, 2] = -50.0
    assert calibrate(np.array([0.1, 0.1, 0.8]), calib, 0)[2] < 1e-20


def test_moe_examples():
    rng = np.random.default_rng(0)
    p = softmax(rng.normal(size=(3, 4, C)))
    ident = CalibrationParams.identity(K, C)
    np.testing.assert_allclose(moe_combine([p, p, p], ident), calibrate(p, ident, 0), atol=1e-15)
    a = moe_combine([p, p, p], ident)
    assert a.tobytes() == moe_combine([p, p, p], ident).tobytes()
    # K=2 with saturated, opposite calibrated outputs
    calib = CalibrationParams(np.zeros((2, 2)), np.array([[50.0, -50.0], [-50.0, 50.0]]))
    out = moe_combine([np.full((1, 2), 0.5)] * 2, calib)
    np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-12)


def test_moe_matches_naive_recombination():
    rng = np.random.default_rng(1)
    probs, calib = rand_probs(rng), rand_calib(rng)
    out = moe_combine(probs, calib)
    naive = np.zeros_like(out)
    for i in range(K):
        for y in range(4):
            for x in range(5):
                v = np.exp(calib.w[i] * probs[i][y, x] + calib.beta[i])
                naive[y, x] += v / v.sum() / K
    np.testing.assert_array_equal(out.argmax(-1), naive.argmax(-1))
    np.testing.assert_allclose(out, naive, atol=1e-12)


def test_moe_argmax_permutation_invariant():
    rng = np.random.default_rng(2)
    probs, calib = rand_probs(rng), rand_calib(rng)
    perm = [2, 0, 1]
    pc = CalibrationParams(calib.w[perm], calib.beta[perm])
    np.testing.assert_array_equal(moe_combine(probs, calib).argmax(-1), moe_combine([probs[i] for i in perm], pc).argmax(-1))


def test_oracle_selection():
    g = grouping()
    labels = np.array([[0, 1, 2, 3, 4, 5, IGNORE]])
    assert expert_selection(labels, g).tolist() == [[0, 0, 1, 1, 2, 2, 0]]
    rng = np.random.default_rng(3)
    probs = rand_probs(rng, (1, 7))
    out = oracle_combine(probs, labels, g)
    for j, e in enumerate([0, 0, 1, 1, 2, 2, 0]):
        np.testing.assert_array_equal(out[0, j], probs[e][0, j])
    tail = np.full((2, 2), 4)
    probs = rand_probs(rng, (2, 2))
    np.testing.assert_array_equal(oracle_combine(probs, tail, g), probs[2])
    one = g.with_experts(1)
    np.testing.assert_array_equal(oracle_combine(probs[:1], rng.integers(0, C, (2, 2)), one), probs[0])


def test_oracle_ignores_predictions():
    g = grouping()
    rng = np.random.default_rng(4)
    labels = rng.integers(0, C, (4, 5))
    probs = rand_probs(rng)
    base = expert_selection(labels, g)
    shuffled = [p[rng.permutation(4)] for p in probs]
    # the selection only depends on ground truth
    np.testing.assert_array_equal(expert_selection(labels, g), base)
    out = oracle_combine(shuffled, labels, g)
    picked = np.take_along_axis(np.stack(shuffled), base[None, ..., None], axis=0)[0]
    np.testing.assert_array_equal(out, picked)


def test_softmax_threshold_rule():
    g = grouping()
    p1 = np.array([[0.9, 0.02, 0.02, 0.02, 0.02, 0.02]])
    p3 = np.array([[0.02, 0.02, 0.02, 0.02, 0.9, 0.02]])
    flat = np.full((1, C), 1 / C)
    assert aggregate_baseline([p1, flat, p3], "softmax", g).tolist() == [4]
    assert aggregate_baseline([p1, flat, flat], "softmax", g).tolist() == [0]


def test_single_expert_methods_reduce_to_argmax():
    g = grouping().with_experts(1)
    rng = np.random.default_rng(5)
    (p,) = rand_probs(rng, k=1)
    for m in ("softmax", "argmax", "group-avg"):
        out = aggregate_baseline([p], m, g)
        out = out.argmax(-1) if out.ndim == 3 else out
        np.testing.assert_array_equal(out, p.argmax(-1))
    with pytest.raises(ValueError):
        aggregate_baseline([p], "vote", g)


def test_argmax_rule():
    a = np.array([[0.5, 0.3, 0.2, 0, 0, 0]])
    b = np.array([[0.1, 0.1, 0.1, 0.6, 0.05, 0.05]])
    assert aggregate_baseline([a, b], "argmax").tolist() == [3]


def test_group_average_is_simplex():
    rng = np.random.default_rng(6)
    out = aggregate_baseline(rand_probs(rng), "group-avg", grouping())
    np.testing.assert_allclose(out.sum(-1), 1, atol=1e-9)
    assert (out >= 0).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_every_combiner_output_is_a_distribution(seed):
    rng = np.random.default_rng(seed)
    probs, calib, g = rand_probs(rng), rand_calib(rng), grouping()
    labels = rng.integers(0, C, (4, 5))
    outs = [
        moe_combine(probs, calib),
        moe_combine(probs, CalibrationParams.identity(K, C)),
        oracle_combine(probs, labels, g),
        aggregate_baseline(probs, "group-avg", g),
        as_probabilities(aggregate_baseline(probs, "softmax", g), C),
        as_probabilities(aggregate_baseline(probs, "argmax", g), C),
    ]
    for o in outs:
        assert o.shape == (4, 5, C)
        assert (o >= 0).all()
        np.testing.assert_allclose(o.sum(-1), 1, atol=1e-9)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_select_loss_gradient(seed, reduction):
    rng = np.random.default_rng(500 + seed)
    probs, calib = rand_probs(rng, (3, 3)), rand_calib(rng)
    labels = rng.integers(0, C, (3, 3))
    labels[0, 0] = IGNORE
    _, gw, gb = select_loss(probs, labels, calib, reduction)
    num_w = central_difference(lambda: select_loss(probs, labels, calib, reduction)[0], calib.w)
    num_b = central_difference(lambda: select_loss(probs, labels, calib, reduction)[0], calib.beta)
    assert rel_error(gw, num_w) < 1e-4
    assert rel_error(gb, num_b) < 1e-4


def test_select_loss_value():
    rng = np.random.default_rng(7)
    probs, calib = rand_probs(rng, (2, 2)), rand_calib(rng)
    labels = np.array([[0, 3], [5, IGNORE]])
    pf = moe_combine(probs, calib)
    want = -sum(np.log(pf[i, j, labels[i, j]]) for i, j in [(0, 0), (0, 1), (1, 0)])
    assert select_loss(probs, labels, calib, "sum")[0] == pytest.approx(want, rel=1e-12)
    assert select_loss(probs, labels, calib, "mean")[0] == pytest.approx(want / 3, rel=1e-12)


def test_probability_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    probs = rng.random((2, K, 3, 4, C))
    save_probabilities(tmp_path / "p.medp", probs)
    back = load_probabilities(tmp_path / "p.medp")
    np.testing.assert_array_equal(back, probs.astype(np.float32))
    raw = (tmp_path / "p.medp").read_bytes()
    assert raw[:4] == b"MEDP"
    (tmp_path / "bad.medp").write_bytes(raw[:-2])
    with pytest.raises(ValueError):
        load_probabilities(tmp_path / "bad.medp")
