import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scanmatch import autodiff as ad
from scanmatch.errors import DimensionError, DomainError, StateError

from . import oracles
from .gradcheck import max_rel_error, numeric_grads


def test_matmul_identity():
    A = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal(ad.matmul(np.eye(2), A), A)


def test_matmul_hand_checked():
    out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    assert out.tolist() == [[3.0], [7.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    expected = np.array(oracles.matmul(A.tolist(), B.tolist()))
    assert np.max(np.abs(ad.matmul(A, B) - expected)) <= 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        A, B, C = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=(3, 6))
        assert np.allclose(ad.matmul(ad.matmul(A, B), C), ad.matmul(A, ad.matmul(B, C)), atol=1e-9, rtol=0)


def test_softmax_scaled_uniform():
    assert np.allclose(ad.softmax_scaled([0.3, 0.3, 0.3], 7.0), [1 / 3] * 3, atol=1e-15)


def test_softmax_scaled_against_extended_precision():
    # mpmath at 40 digits: exp(9*0.6) / (exp(9*0.6) + exp(9*0.8))
    expected = [0.14185106490048778959, 0.85814893509951221041]
    assert np.allclose(ad.softmax_scaled([0.6, 0.8], 9.0), expected, atol=1e-15, rtol=0)


def test_softmax_scaled_no_overflow():
    w = ad.softmax_scaled([1000.0, 0.0], 1.0)
    assert np.all(np.isfinite(w))
    assert w[0] == pytest.approx(1.0) and w[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_scaled_errors():
    with pytest.raises(DomainError):
        ad.softmax_scaled([], 1.0)
    with pytest.raises(DomainError):
        ad.softmax_scaled([1.0], 0.0)


vectors = arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50))


@settings(max_examples=200, deadline=None)
@given(vectors, st.floats(0.01, 20), st.floats(-100, 100), st.randoms(use_true_random=False))
def test_softmax_properties(x, lam, c, rnd):
    w = ad.softmax_scaled(x, lam)
    assert np.all(w > 0) or lam * (x.max() - x.min()) > 700  # underflow only for extreme spreads
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.allclose(ad.softmax_scaled(x + c, lam), w, atol=1e-12, rtol=0)
    perm = list(range(len(x)))
    rnd.shuffle(perm)
    assert np.allclose(ad.softmax_scaled(x[perm], lam), w[perm], atol=1e-12, rtol=0)


def test_l2_normalize_examples():
    assert np.allclose(ad.l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)
    assert ad.l2_normalize([0.0, 0.0], 1e-8).tolist() == [0.0, 0.0]
    x = np.random.default_rng(2).normal(size=17)
    assert abs(np.linalg.norm(ad.l2_normalize(x)) - 1.0) <= 1e-12


def test_backward_identity_and_square():
    tape = ad.Tape()
    p = tape.param("p", np.array(2.5))
    assert tape.backward(p)["p"] == pytest.approx(1.0)

    tape = ad.Tape()
    p = tape.param("p", np.array(3.0))
    assert tape.backward(p * p)["p"] == pytest.approx(6.0)


def test_backward_state_errors():
    tape = ad.Tape()
    with pytest.raises(StateError):
        tape.backward(np.array(1.0))
    p = tape.param("p", np.array(1.0))
    loss = p * 2.0
    tape.backward(loss)
    with pytest.raises(StateError):
        tape.backward(loss)
    other = ad.Tape()
    q = other.param("q", np.array(1.0))
    with pytest.raises(StateError):
        ad.Tape().backward(q)


def test_backward_rejects_non_scalar():
    tape = ad.Tape()
    p = tape.param("p", np.ones(3))
    with pytest.raises(DimensionError):
        tape.backward(p * 2.0)


def test_unused_param_gets_zero_grad():
    tape = ad.Tape()
    p = tape.param("p", np.array([1.0, 2.0]))
    tape.param("unused", np.ones((2, 2)))
    grads = tape.backward(ad.sum(p * p))
    assert grads["unused"].tolist() == [[0.0, 0.0], [0.0, 0.0]]


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))

    def run():
        tape = ad.Tape()
        p = tape.param("x", x)
        return tape.backward(ad.sum(ad.softmax(p, axis=1) * ad.tanh(p)))["x"]

    assert np.array_equal(run(), run())


RNG = np.random.default_rng(11)
W = RNG.normal(size=(3, 4))
MASK = RNG.random((3, 4)) > 0.3
MASK[:, 0] = True

# each primitive composed with a fixed random weighting so every output entry matters
PRIMITIVES = {
    "add": (lambda x, y: ad.sum((x + y) * W), [(3, 4), (1, 4)]),
    "sub": (lambda x, y: ad.sum((x - y) * W), [(3, 4), (3, 1)]),
    "mul": (lambda x, y: ad.sum(x * y * W), [(3, 4), (3, 4)]),
    "div": (lambda x, y: ad.sum(x / (y * y + 1.0) * W), [(3, 4), (3, 4)]),
    "neg": (lambda x: ad.sum(-x * W), [(3, 4)]),
    "exp": (lambda x: ad.sum(ad.exp(x) * W), [(3, 4)]),
    "log": (lambda x: ad.sum(ad.log(x * x + 0.5) * W), [(3, 4)]),
    "tanh": (lambda x: ad.sum(ad.tanh(x) * W), [(3, 4)]),
    "sigmoid": (lambda x: ad.sum(ad.sigmoid(x) * W), [(3, 4)]),
    "relu": (lambda x: ad.sum(ad.relu(x) * W), [(3, 4)]),
    "where": (lambda x, y: ad.sum(ad.where(MASK, x, y) * W), [(3, 4), (3, 4)]),
    "matmul": (lambda x, y: ad.sum((x @ y) * W), [(3, 5), (5, 4)]),
    "batched_matmul": (lambda x, y: ad.sum((x @ y) * W), [(2, 3, 5), (1, 5, 4)]),
    "transpose": (lambda x: ad.sum(ad.transpose(x) * W), [(4, 3)]),
    "reshape": (lambda x: ad.sum(ad.reshape(x, (3, 4)) * W), [(2, 6)]),
    "expand_dims": (lambda x: ad.sum(ad.expand_dims(x, 0) * W), [(3, 4)]),
    "getitem": (lambda x: ad.sum(x[1:, ::2] * W[1:, ::2]), [(3, 4)]),
    "take_rows": (lambda x: ad.sum(ad.take_rows(x, [2, 0, 2]) * W), [(5, 4)]),
    "stack": (lambda x, y: ad.sum(ad.stack([x, y], axis=0)[:, 0] * W[:2]), [(3, 4), (3, 4)]),
    "sum_axis": (lambda x: ad.sum(ad.sum(x, axis=1) * W[:, 0]), [(3, 4)]),
    "safe_norm": (lambda x: ad.sum(ad.safe_norm(x, axis=1) * W[:, :1]), [(3, 4)]),
    "softmax": (lambda x: ad.sum(ad.softmax(x, axis=1) * W), [(3, 4)]),
    "masked_softmax": (lambda x: ad.sum(ad.softmax(x, axis=1, mask=MASK) * W), [(3, 4)]),
    "logsumexp": (lambda x: ad.sum(ad.logsumexp(x, axis=1, mask=MASK) * W[:, 0]), [(3, 4)]),
    "amax": (lambda x: ad.sum(ad.amax(x, axis=0) * W[0]), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays_in = {f"x{i}": rng.normal(size=s) for i, s in enumerate(shapes)}

    def loss_value(arrs):
        return float(fn(*arrs.values()))

    tape = ad.Tape()
    vars_ = [tape.param(k, v) for k, v in arrays_in.items()]
    analytic = tape.backward(fn(*vars_))
    numeric = numeric_grads(loss_value, {k: v.copy() for k, v in arrays_in.items()}, h=1e-5)
    assert max_rel_error(analytic, numeric, floor=1e-4) <= 1e-6


def test_plain_arrays_stay_plain():
    x = np.ones((2, 2))
    assert isinstance(ad.tanh(x) @ x + 1.0, np.ndarray)


def test_safe_norm_zero_vector_has_zero_gradient():
    tape = ad.Tape()
    p = tape.param("p", np.zeros((1, 3)))
    g = tape.backward(ad.sum(p / ad.safe_norm(p)))["p"]
    assert np.all(np.isfinite(g))


def test_fully_masked_softmax_slice_is_zero():
    w = ad.softmax(np.array([[1.0, 2.0]]), axis=1, mask=np.array([[False, False]]))
    assert w.tolist() == [[0.0, 0.0]]
