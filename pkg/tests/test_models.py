import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gatekeeper import models as m
from gatekeeper.errors import ConfigError, NumericDomainError, ParseError, ShapeError
from gatekeeper.numerics import grad_check, softmax


def _sum_loss_grad(params, X, upstream):
    """Analytic gradient of sum(upstream * logits) and the matching scalar function."""
    trace = m.forward(params, X)
    grads = m.backward(params, trace, upstream)

    def f(theta):
        return float(np.sum(upstream * m.forward(params.unflatten(theta), X).logits))

    return grads.flatten(), f


def test_init_is_deterministic_with_expected_shapes():
    a = m.init_params(7, [2, 3, 2])
    b = m.init_params(7, [2, 3, 2])
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert [w.shape for w in a.weights] == [(2, 3), (3, 2)]
    assert all(np.all(bias == 0) for bias in a.biases)


def test_init_rejects_bad_dims():
    with pytest.raises(ConfigError):
        m.init_params(0, [])
    with pytest.raises(ConfigError):
        m.init_params(0, [3])
    with pytest.raises(ConfigError):
        m.init_params(0, [2, 0, 2])


def test_init_weight_bounds():
    p = m.init_params(1, [16, 50, 3])
    assert np.abs(p.weights[0]).max() <= 1 / 4
    assert np.abs(p.weights[1]).max() <= 1 / np.sqrt(50)


def test_zero_model_gives_uniform():
    p = m.init_params(0, [3, 4, 5]).zeros_like()
    logits = m.forward(p, np.ones((2, 3))).logits
    np.testing.assert_array_equal(logits, 0)
    np.testing.assert_allclose(softmax(logits), 0.2)


def test_empty_batch():
    p = m.init_params(0, [3, 4, 2])
    assert m.forward(p, np.zeros((0, 3))).logits.shape == (0, 2)


def test_identity_single_layer():
    p = m.MlpParams((3, 3), [np.eye(3)], [np.zeros(3)])
    X = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(m.forward(p, X).logits, X)


def test_forward_shape_mismatch():
    p = m.init_params(0, [3, 2])
    with pytest.raises(ShapeError):
        m.forward(p, np.ones((4, 2)))


def test_backward_zero_upstream():
    p = m.init_params(0, [3, 4, 2])
    X = np.ones((5, 3))
    g = m.backward(p, m.forward(p, X), np.zeros((5, 2)))
    assert all(np.all(a == 0) for a in g.arrays())


def test_backward_shape_mismatch():
    p = m.init_params(0, [3, 4, 2])
    tr = m.forward(p, np.ones((5, 3)))
    with pytest.raises(ShapeError):
        m.backward(p, tr, np.zeros((5, 3)))


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_backward_matches_finite_differences(rng, activation):
    for _ in range(10):
        p = m.init_params(int(rng.integers(1000)), [3, 5, 4, 3], activation)
        X = rng.normal(size=(6, 3))
        up = rng.normal(size=(6, 3))
        trace = m.forward(p, X)
        if activation == "relu" and min(np.abs(z).min() for z in trace.pre_activations) < 1e-4:
            continue  # central differences straddle the kink; subgradient 0 vs half-slope
        analytic, f = _sum_loss_grad(p, X, up)
        assert grad_check(f, analytic, p.flatten()).passed(1e-4)


def test_batch_gradient_is_sum_of_singletons(rng):
    p = m.init_params(3, [3, 4, 2], "tanh")
    X = rng.normal(size=(4, 3))
    up = rng.normal(size=(4, 2))
    full = m.backward(p, m.forward(p, X), up).flatten()
    parts = sum(m.backward(p, m.forward(p, X[i:i + 1]), up[i:i + 1]).flatten() for i in range(4))
    np.testing.assert_allclose(full, parts, atol=1e-12)


def test_sgd_plain_step():
    p = m.init_params(0, [2, 2])
    g = p.with_arrays([np.ones_like(a) for a in p.arrays()])
    new, _ = m.sgd_step(p, g, lr=0.1)
    for a, b in zip(p.arrays(), new.arrays()):
        np.testing.assert_allclose(b, a - 0.1)


def test_sgd_zero_gradient_is_noop():
    p = m.init_params(0, [2, 3])
    new, v = m.sgd_step(p, p.zeros_like(), lr=0.5, momentum=0.9)
    for a, b in zip(p.arrays(), new.arrays()):
        np.testing.assert_array_equal(a, b)
    assert all(np.all(x == 0) for x in v)


def test_sgd_quadratic_two_steps():
    # f(theta) = theta^2 on a 1x1 "network"; theta <- theta - 0.1 * 2 theta
    p = m.MlpParams((1, 1), [np.array([[1.0]])], [np.array([0.0])])
    v = None
    for _ in range(2):
        g = p.with_arrays([2 * p.weights[0], np.zeros(1)])
        p, v = m.sgd_step(p, g, lr=0.1, momentum=0.0, velocity=v)
    assert p.weights[0][0, 0] == pytest.approx(0.64)


def test_sgd_momentum_accumulates():
    p = m.MlpParams((1, 1), [np.array([[0.0]])], [np.array([0.0])])
    g = p.with_arrays([np.array([[1.0]]), np.zeros(1)])
    p, v = m.sgd_step(p, g, lr=1.0, momentum=0.5)
    p, v = m.sgd_step(p, g, lr=1.0, momentum=0.5, velocity=v)
    assert p.weights[0][0, 0] == pytest.approx(-(1.0 + 1.5))


def test_sgd_rejects_non_finite():
    p = m.init_params(0, [2, 2])
    g = p.with_arrays([np.full_like(a, np.nan) for a in p.arrays()])
    with pytest.raises(NumericDomainError):
        m.sgd_step(p, g, lr=0.1)


def test_predict_argmax():
    assert m.predict_argmax([0.1, 0.9]) == 1
    assert m.predict_argmax([0.5, 0.5]) == 0


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-1e3, 1e3))
def test_predict_argmax_shift_invariant(z, c):
    z = np.array(z)
    assert m.predict_argmax(z) == m.predict_argmax(z + c) or np.isclose(np.sort(z)[-1], np.sort(z)[-2])


def test_flatten_roundtrip():
    p = m.init_params(2, [3, 4, 2])
    q = p.unflatten(p.flatten())
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ShapeError):
        p.unflatten(np.zeros(3))


# --------------------------------------------------------------------- tokens


def test_token_forward_shapes_and_bos():
    p = m.init_token_params(0, vocab_size=5, context_window=3, hidden=(4,))
    logits, _ = p_forward = m.token_forward(p, np.array([2]))
    assert logits.shape == (1, 5)
    # T=1 sees only BOS slots, i.e. an all-zero input row
    X = m.encode_contexts(np.array([[2]]), 5, 3)
    np.testing.assert_array_equal(X, 0)
    batch, _ = m.token_forward(p, np.array([[1, 2, 3], [0, 0, 0]]))
    assert batch.shape == (2, 3, 5)
    del p_forward


def test_token_zero_model_uniform():
    p = m.init_token_params(0, 4, 2, (3,))
    p = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
    logits, _ = m.token_forward(p, np.array([[1, 2, 3]]))
    np.testing.assert_allclose(softmax(logits), 0.25)


def test_token_out_of_range():
    p = m.init_token_params(0, 4)
    with pytest.raises(IndexError):
        m.token_forward(p, np.array([[1, 4]]))


def test_token_causality(rng):
    p = m.init_token_params(1, 6, 3, (8,))
    seq = rng.integers(0, 6, size=10)
    base, _ = m.token_forward(p, seq)
    for t in range(10):
        edited = seq.copy()
        edited[t:] = rng.integers(0, 6, size=10 - t)
        out, _ = m.token_forward(p, edited)
        # position t only sees tokens before t
        np.testing.assert_array_equal(out[: t + 1], base[: t + 1])


def test_encode_contexts_layout():
    X = m.encode_contexts(np.array([[1, 2, 0]]), 3, 2).reshape(3, 2, 3)
    # position 0: BOS, BOS
    np.testing.assert_array_equal(X[0], 0)
    # position 2: slots hold tokens at t-2, t-1 = 1, 2
    np.testing.assert_array_equal(X[2], [[0, 1, 0], [0, 0, 1]])


def test_token_backward_matches_finite_differences(rng):
    p = m.init_token_params(4, 3, 2, (4,), "tanh")
    seqs = rng.integers(0, 3, size=(2, 4))
    up = rng.normal(size=(2, 4, 3))
    logits, trace = m.token_forward(p, seqs)
    analytic = m.token_backward(p, trace, up).flatten()

    def f(theta):
        z, _ = m.token_forward(p.unflatten(theta), seqs)
        return float(np.sum(up * z))

    assert grad_check(f, analytic, p.flatten()).passed(1e-4)


# ----------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("make", [lambda: m.init_params(3, [2, 3, 4], "tanh"),
                                  lambda: m.init_token_params(3, 5, 2, (6,))])
def test_checkpoint_roundtrip_is_exact(tmp_path, make):
    p = make()
    path = m.save_checkpoint(p, tmp_path / "c.json")
    q = m.load_checkpoint(path)
    assert type(q) is type(p)
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)
    # re-saving gives identical bytes
    m.save_checkpoint(q, tmp_path / "d.json")
    assert (tmp_path / "c.json").read_bytes() == (tmp_path / "d.json").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ParseError):
        m.load_checkpoint(bad)
    bad.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ParseError):
        m.load_checkpoint(bad)
    bad.write_text(json.dumps({"format": m.CHECKPOINT_FORMAT, "version": 99}))
    with pytest.raises(ParseError):
        m.load_checkpoint(bad)
