import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gatekeeper import gating as G
from gatekeeper.errors import DataError, ShapeError


def test_g_cl_examples():
    assert G.g_cl(np.full(10, 0.1)) == pytest.approx(0.1)
    assert G.g_cl([0.0, 1.0, 0.0]) == 1.0
    assert G.g_cl([0.2, 0.3, 0.5]) == 0.5
    np.testing.assert_allclose(G.g_cl([[0.2, 0.8], [0.6, 0.4]]), [0.8, 0.6])


def test_g_nent_examples():
    assert G.g_nent(np.eye(3)) == pytest.approx(0.0, abs=1e-9)
    assert G.g_nent(np.full((5, 4), 0.25)) == pytest.approx(-math.log(4))
    assert round(G.g_nent([[0.8, 0.2], [0.5, 0.5]]), 6) == -0.596775


def test_g_nent_batch_and_lengths():
    seq = np.array([[[0.8, 0.2], [0.5, 0.5]], [[1.0, 0.0], [0.5, 0.5]]])
    out = G.g_nent(seq)
    assert out.shape == (2,)
    assert out[0] == pytest.approx(-0.596775, abs=1e-6)
    # truncating the second sequence at length 1 drops the uniform position
    assert G.g_nent(seq, lengths=[2, 1])[1] == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ShapeError):
        G.g_nent(seq, lengths=[0, 1])


def test_g_nent_empty_sequence():
    with pytest.raises(ShapeError):
        G.g_nent(np.zeros((0, 3)))


def test_sequence_lengths():
    np.testing.assert_array_equal(G.sequence_lengths([[1, 2, 3], [3, 1, 1]], 3), [3, 1])
    np.testing.assert_array_equal(G.sequence_lengths([[1, 2, 3]], None), [3])
    np.testing.assert_array_equal(G.sequence_lengths([[1, 2, 2]], 0), [3])


def test_cascade_decide_boundary():
    rule = G.DeferralRule(G.GatingFunction(), 0.5)
    assert G.cascade_decide(0.9, rule) == G.ACCEPT
    assert G.cascade_decide(0.5, rule) == G.ACCEPT
    assert G.cascade_decide(0.1, rule) == G.DEFER


def test_gating_kind_validation():
    with pytest.raises(ValueError):
        G.GatingFunction("entropy")


def test_calibrate_examples():
    s = [0.1, 0.2, 0.3, 0.4]
    tau, ratio = G.calibrate_threshold(s, 0.5)
    assert ratio == 0.5
    assert [x for x in s if x < tau] == [0.1, 0.2]
    tau, ratio = G.calibrate_threshold(s, 0.0)
    assert ratio == 0 and tau == min(s)
    tau, ratio = G.calibrate_threshold(s, 1.0)
    assert ratio == 1 and tau == math.inf


def test_calibrate_ties_toward_fewer_deferrals():
    # cuts at 0, 1/4, 2/4 ...; target 0.375 is equidistant from 0.25 and 0.5
    tau, ratio = G.calibrate_threshold([0.1, 0.2, 0.3, 0.4], 0.375)
    assert ratio == 0.25


def test_calibrate_respects_tied_signals():
    tau, ratio = G.calibrate_threshold([0.5, 0.5, 0.5, 0.9], 0.5)
    assert ratio in (0.0, 0.75)
    assert ratio == 0.75  # |0.75-0.5| < |0-0.5|
    assert tau == 0.9


def test_calibrate_errors():
    with pytest.raises(DataError):
        G.calibrate_threshold([], 0.5)
    with pytest.raises(ValueError):
        G.calibrate_threshold([0.1], 1.5)


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=40), st.floats(0, 1))
def test_calibrate_achieved_ratio_is_real_and_optimal(signals, target):
    s = np.array(signals)
    tau, ratio = G.calibrate_threshold(s, target)
    assert ratio == pytest.approx(np.mean(s < tau))
    achievable = {float(np.mean(s < t)) for t in [*s.tolist(), math.inf]}
    best = min(abs(a - target) for a in achievable)
    assert abs(ratio - target) <= best + 1e-12


@given(st.integers(2, 8), st.integers(0, 10_000))
def test_signal_ranges(c, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(c), size=5)
    cl = G.g_cl(p)
    assert np.all(cl >= 1 / c - 1e-12) and np.all(cl <= 1)
    ne = G.g_nent(p[:, None, :])
    assert np.all(ne <= 1e-12) and np.all(ne >= -math.log(c) - 1e-12)
