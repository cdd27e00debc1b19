import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from insnet import diffmath as dm


def fd_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def test_matmul_examples():
    out = dm.matmul(dm.constant([[1.0, 0.0], [0.0, 1.0]]), dm.constant([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.value, [[3, 4], [5, 6]])
    assert dm.matmul(dm.constant([[1.0, 2.0]]), dm.constant([[3.0], [4.0]])).value.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dm.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dm.matmul(dm.constant(np.zeros((2, 3))), dm.constant(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences(rng):
    with dm.precision("float64"):
        a0 = rng.normal(size=(5, 4))
        b0 = rng.normal(size=(4, 3))
        a = dm.param(a0.copy())
        b = dm.param(b0.copy())
        with dm.Tape() as tape:
            tape.backward(dm.sum(dm.matmul(a, b)))
        np.testing.assert_allclose(a.grad, np.broadcast_to(b0.sum(axis=1), (5, 4)), rtol=1e-12)
        num = fd_grad(lambda x: float((x @ b0).sum()), a0.copy())
        assert np.max(np.abs(a.grad - num) / np.maximum(np.abs(num), 1e-6)) < 1e-6
        np.testing.assert_allclose(b.grad, np.broadcast_to(a0.sum(axis=0)[:, None], (4, 3)), rtol=1e-12)


def test_masked_softmax_examples():
    with dm.precision("float64"):
        np.testing.assert_allclose(dm.masked_softmax(dm.constant([0.0, 0.0]), np.array([True, True])).value, [0.5, 0.5])
        p = dm.masked_softmax(dm.constant([5.0, -100.0]), np.array([True, False])).value
        assert p.tolist() == [1.0, 0.0]
        z = np.array([1.0, 2.0, 3.0])
        ref = [math.exp(v) / math.fsum(math.exp(u) for u in z) for v in z]
        assert np.max(np.abs(dm.masked_softmax(dm.constant(z)).value - ref)) < 1e-12


def test_masked_softmax_fully_masked_row_raises():
    with pytest.raises(dm.InvalidMaskError):
        dm.masked_softmax(dm.constant(np.zeros((2, 3))), np.array([[True, False, False], [False, False, False]]))


def test_masked_entries_exactly_zero(rng):
    mask = rng.random((6, 9)) < 0.5
    mask[:, 0] = True
    p = dm.masked_softmax(dm.constant(rng.normal(size=(6, 9)) * 30), mask).value
    assert np.all(p[~mask] == 0.0)
    assert np.all(np.abs(p.sum(-1) - 1) < 1e-6)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=12),
    st.integers(0, 2**32 - 1),
)
def test_softmax_rows_normalize_and_are_nonnegative(values, seed):
    v = np.asarray(values)
    mask = np.random.default_rng(seed).random(v.size) < 0.6
    mask[0] = True
    p = dm.masked_softmax(dm.constant(v, dtype=np.float64), mask).value
    assert abs(p.sum() - 1) < 1e-6
    assert p.min() >= 0


def test_layer_norm_constant_row():
    gain = dm.constant([2.0, 2.0, 2.0])
    bias = dm.constant([0.5, -1.0, 3.0])
    out = dm.layer_norm(dm.constant([[4.0, 4.0, 4.0]]), gain, bias).value
    np.testing.assert_allclose(out, [[0.5, -1.0, 3.0]])
    with pytest.raises(dm.ParameterError):
        dm.layer_norm(dm.constant([[1.0]]), dm.constant([1.0]), dm.constant([0.0]), eps=0.0)


def test_cross_entropy_uniform_is_log_vocab():
    with dm.precision("float64"):
        for target in (0, 3, 9):
            ce = dm.cross_entropy_from_logits(dm.constant(np.zeros(10)), target)
            assert abs(float(ce.value) - math.log(10)) < 1e-12


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        dm.cross_entropy_from_logits(dm.constant(np.zeros(4)), 4)


def test_gather_rows_example():
    out = dm.gather_rows(dm.constant([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]), [2, 0])
    assert out.value.tolist() == [[5.0, 6.0], [1.0, 2.0]]
    with pytest.raises(IndexError):
        dm.gather_rows(dm.constant(np.zeros((3, 2))), [3])


def test_dropout_probability_validated(rng):
    with pytest.raises(dm.ParameterError):
        dm.dropout(dm.constant(np.ones(3)), 1.0, rng)
    with pytest.raises(dm.ParameterError):
        dm.dropout(dm.constant(np.ones(3)), -0.1, rng)
    x = dm.constant(np.ones(1000))
    assert dm.dropout(x, 0.5, rng, training=False) is x
    kept = dm.dropout(x, 0.5, rng).value
    assert set(np.unique(kept)) <= {0.0, 2.0}


def test_backward_quadratic():
    with dm.precision("float64"):
        x = dm.param([1.0, 2.0, 3.0])
        with dm.Tape() as tape:
            loss = dm.sum(dm.mul(x, x))
        dm.backward(loss)
        assert x.grad.tolist() == [2.0, 4.0, 6.0]
        assert tape.consumed


def test_backward_twice_raises():
    x = dm.param([1.0, 2.0])
    with dm.Tape():
        loss = dm.sum(dm.mul(x, x))
    dm.backward(loss)
    with pytest.raises(dm.BackwardError):
        dm.backward(loss)


def test_backward_non_scalar_raises():
    x = dm.param([1.0, 2.0])
    with dm.Tape():
        y = dm.mul(x, x)
    with pytest.raises(dm.DimensionError):
        dm.backward(y)


def test_softmax_then_cross_entropy_gradient_is_p_minus_onehot(rng):
    """CE of a masked-softmax output, treated as logits, chains two analytic grads."""
    with dm.precision("float64"):
        z0 = rng.normal(size=(1, 4))
        z = dm.param(z0.copy())
        with dm.Tape() as tape:
            p = dm.masked_softmax(z)
            loss = dm.sum(dm.cross_entropy_from_logits(p, np.array([2])))
            tape.backward(loss)
        p0 = np.exp(z0) / np.exp(z0).sum()
        q = np.exp(p0) / np.exp(p0).sum()
        g_p = q - np.eye(4)[2]
        expected = p0 * (g_p - (g_p * p0).sum())
        assert np.max(np.abs(z.grad - expected)) < 1e-10
        # cross-entropy on raw logits is exactly softmax minus one-hot
        z.grad = None
        with dm.Tape() as tape:
            tape.backward(dm.sum(dm.cross_entropy_from_logits(z, np.array([2]))))
        assert np.max(np.abs(z.grad - (p0 - np.eye(4)[2]))) < 1e-10


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: dm.add(a, b),
        lambda a, b: dm.sub(a, b),
        lambda a, b: dm.mul(a, b),
        lambda a, b: dm.gelu(a),
        lambda a, b: dm.relu(a),
        lambda a, b: dm.tanh(a),
        lambda a, b: dm.concat_last_dim([a, b]),
        lambda a, b: dm.layer_norm(a, dm.sum(b, axis=0), dm.sum(b, axis=0)),
        lambda a, b: dm.masked_softmax(a, np.tri(3, dtype=bool)),
        lambda a, b: dm.take_along_last(a, np.array([[0, 2], [1, 1], [2, 0]])),
        lambda a, b: dm.matmul(a, dm.transpose(b)),
        lambda a, b: dm.scale(a, 0.3),
    ],
)
def test_composed_op_gradients(op, rng):
    with dm.precision("float64"):
        a0 = rng.normal(size=(3, 3))
        b0 = rng.normal(size=(3, 3))
        w = rng.normal(size=op(dm.constant(a0), dm.constant(b0)).shape)

        def f(x, y):
            return float((op(dm.constant(x), dm.constant(y)).value * w).sum())

        a, b = dm.param(a0.copy()), dm.param(b0.copy())
        with dm.Tape() as tape:
            tape.backward(dm.sum(dm.mul(op(a, b), dm.constant(w))))
        for leaf, ref in ((a, fd_grad(lambda x: f(x, b0), a0.copy())), (b, fd_grad(lambda y: f(a0, y), b0.copy()))):
            got = leaf.grad if leaf.grad is not None else np.zeros_like(ref)
            assert np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-6)) < 1e-4


def test_operations_do_not_mutate_inputs(rng):
    a0 = rng.normal(size=(4, 4))
    a = dm.param(a0.copy())
    with dm.Tape() as tape:
        y = dm.layer_norm(dm.gelu(dm.matmul(a, a)), dm.constant(np.ones(4)), dm.constant(np.zeros(4)))
        y = dm.masked_softmax(y, np.tri(4, dtype=bool))
        tape.backward(dm.sum(dm.cross_entropy_from_logits(y, np.array([0, 1, 2, 3]))))
    np.testing.assert_array_equal(a.value, a0)


def test_precision_modes():
    with dm.precision("float32"):
        assert dm.constant([1.0]).dtype == np.float32
    with dm.precision("float64"):
        assert dm.constant([1.0]).dtype == np.float64


def test_determinism_bitwise():
    def run():
        r = np.random.default_rng(5)
        x = dm.param(r.normal(size=(8, 8)))
        with dm.Tape() as tape:
            y = dm.dropout(dm.gelu(dm.matmul(x, x)), 0.3, r)
            tape.backward(dm.sum(y))
        return y.value, x.grad

    (y1, g1), (y2, g2) = run(), run()
    assert np.array_equal(y1, y2) and np.array_equal(g1, g2)
