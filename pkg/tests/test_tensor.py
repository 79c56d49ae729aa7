"""Gradient and contract checks for the autodiff core.

Every op gets a finite-difference property test at float64; the tolerances
follow the numerics contract (rel err < 1e-4 with central differences at
eps = 1e-4).
"""

import numpy as np
import pytest

import agglomerator.tensor as T
from agglomerator.tensor import Tensor

from helpers import max_rel_err, numeric_grad

RNG = np.random.default_rng(20260810)


def leaf(shape, scale=1.0):
    return Tensor(RNG.standard_normal(shape) * scale, requires_grad=True)


def check_grads(build, leaves, eps=1e-4, tol=1e-4):
    """build() -> scalar Tensor from `leaves`; compare backward vs FD."""
    loss = build()
    loss.backward()
    analytic = [lf.grad.copy() for lf in leaves]
    for lf in leaves:
        lf.grad = None
    numeric = numeric_grad(lambda: build().item(), [lf.value for lf in leaves], eps=eps)
    for a, n in zip(analytic, numeric):
        assert max_rel_err(a, n) < tol


# --- trivial anchor values -------------------------------------------------

def test_gelu_at_zero():
    assert T.gelu(Tensor(np.zeros(3))).value == pytest.approx(0.0)


def test_softmax_constant_rows():
    for c in (-3.0, 0.0, 7.5):
        out = T.softmax(Tensor(np.full((2, 3), c)), axis=-1)
        assert out.value == pytest.approx(1.0 / 3.0)


def test_sine_backward_at_zero():
    x = Tensor(np.zeros((), dtype=np.float64), requires_grad=True)
    T.sine(x).backward()
    assert x.grad == pytest.approx(1.0)


def test_sum_of_squares_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.tsum(x * x).backward()
    assert x.grad == pytest.approx([2.0, 4.0])


def test_mean_grad():
    x = Tensor(np.ones(4), requires_grad=True)
    T.mean(x).backward()
    assert x.grad == pytest.approx([0.25] * 4)


# --- per-op finite-difference property tests --------------------------------

def test_add_broadcast_grad():
    a, b = leaf((3, 4)), leaf((4,))
    check_grads(lambda: T.tsum(T.mul(a + b, a + b)), [a, b])


def test_mul_grad():
    a, b = leaf((2, 5)), leaf((2, 5))
    check_grads(lambda: T.tsum(a * b), [a, b])


def test_scale_grad():
    a = leaf((4,))
    check_grads(lambda: T.tsum((a * 3.5) * (a * 3.5)), [a])


def test_matmul_2d_grad():
    a, b = leaf((3, 4)), leaf((4, 2))
    check_grads(lambda: T.tsum(T.mul(a @ b, a @ b)), [a, b])


def test_matmul_batched_grad():
    a, b = leaf((2, 3, 4)), leaf((2, 4, 3))
    check_grads(lambda: T.tsum(a @ b), [a, b])


def test_matmul_batched_by_2d_grad():
    a, w = leaf((2, 3, 4)), leaf((4, 5))
    check_grads(lambda: T.tsum(T.mul(a @ w, a @ w)), [a, w])


def test_relu_grad_away_from_kink():
    vals = RNG.standard_normal((3, 3))
    vals[np.abs(vals) < 0.05] = 0.5
    a = Tensor(vals, requires_grad=True)
    check_grads(lambda: T.tsum(T.relu(a) * T.relu(a)), [a])


def test_gelu_grad():
    a = leaf((4, 3))
    check_grads(lambda: T.tsum(T.gelu(a)), [a])


def test_sine_grad():
    a = leaf((5,))
    check_grads(lambda: T.tsum(T.sine(a) * T.sine(a)), [a])


def test_exp_log_grad():
    a = leaf((4,))
    check_grads(lambda: T.tsum(T.log(T.exp(a) + 1.5)), [a])


def test_softmax_grad():
    a = leaf((3, 5))
    w = Tensor(RNG.standard_normal((3, 5)))
    check_grads(lambda: T.tsum(T.softmax(a, axis=-1) * w), [a])


def test_l2_normalize_grad():
    a = Tensor(RNG.standard_normal((4, 6)) + 2.0, requires_grad=True)
    w = Tensor(RNG.standard_normal((4, 6)))
    check_grads(lambda: T.tsum(T.l2_normalize(a, axis=-1) * w), [a])


def test_layer_norm_grad():
    x, g, b = leaf((3, 6)), leaf((6,)), leaf((6,))
    g.value += 1.0
    check_grads(lambda: T.tsum(T.layer_norm(x, g, b) * T.layer_norm(x, g, b)), [x, g, b])


def test_dropout_grad_fixed_mask():
    a = leaf((6, 6))

    def build():
        rng = np.random.default_rng(7)  # same mask on every evaluation
        return T.tsum(T.dropout(a, 0.4, rng, train=True))

    check_grads(build, [a])


def test_reshape_transpose_grad():
    a = leaf((2, 3, 4))
    check_grads(lambda: T.tsum(T.mul(T.transpose(T.reshape(a, (6, 4)), (1, 0)),
                                     T.transpose(T.reshape(a, (6, 4)), (1, 0)))), [a])


def test_concat_grad():
    a, b = leaf((2, 3)), leaf((2, 2))
    w = Tensor(RNG.standard_normal((2, 5)))
    check_grads(lambda: T.tsum(T.concat([a, b], axis=1) * w), [a, b])


def test_take_grad():
    a = leaf((3, 4, 2))
    check_grads(lambda: T.tsum(T.take(a, 2, axis=1) * T.take(a, 2, axis=1)), [a])


def test_take_along_grad():
    a = leaf((4, 5))
    idx = RNG.integers(0, 5, size=(4, 1))
    check_grads(lambda: T.tsum(T.take_along(a, idx, axis=1)), [a])


def test_mean_axis_grad():
    a = leaf((3, 4))
    check_grads(lambda: T.tsum(T.mean(a, axis=1) * T.mean(a, axis=1)), [a])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_grad(stride, padding):
    x = leaf((2, 5, 5, 3), scale=0.5)
    w = leaf((3, 3, 3, 4), scale=0.5)
    check_grads(lambda: T.tsum(T.mul(T.conv2d(x, w, stride, padding),
                                     T.conv2d(x, w, stride, padding))), [x, w])


def test_maxpool2d_grad():
    vals = RNG.standard_normal((2, 4, 4, 3))
    x = Tensor(vals, requires_grad=True)
    check_grads(lambda: T.tsum(T.maxpool2d(x, 2) * T.maxpool2d(x, 2)), [x])


# --- invariants -------------------------------------------------------------

def test_softmax_rows_sum_to_one():
    x = Tensor(RNG.standard_normal((10, 7)) * 10)
    s = T.softmax(x, axis=-1).value.sum(axis=-1)
    assert np.allclose(s, 1.0, atol=1e-6)


def test_l2_normalize_unit_norm():
    x = Tensor(RNG.standard_normal((8, 5)))
    n = np.linalg.norm(T.l2_normalize(x, axis=-1).value, axis=-1)
    assert np.allclose(n, 1.0, atol=1e-6)


def test_l2_normalize_zero_vector_counter():
    T.reset_zero_norm_count()
    x = Tensor(np.zeros((2, 3)))
    out = T.l2_normalize(x, axis=-1)
    assert np.all(out.value == 0.0)
    assert T.zero_norm_count() == 2
    T.reset_zero_norm_count()


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * x
    with pytest.raises(ValueError, match="scalar"):
        y.backward()


def test_backward_rejects_detached():
    x = Tensor(np.ones(()), requires_grad=True)
    with pytest.raises(RuntimeError, match="detached"):
        x.backward()


def test_backward_releases_graph():
    x = Tensor(np.ones(()), requires_grad=True)
    y = x * x
    y.backward()
    with pytest.raises(RuntimeError, match="detached"):
        y.backward()


def test_backward_accumulates_once_through_diamond():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = x * x          # 4
    z = y + y          # dz/dx = 2 * 2x = 8
    z.backward()
    assert x.grad == pytest.approx(8.0)


def test_no_grad_skips_recording():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with T.no_grad():
        y = x * x
    assert y.op is None and not y.requires_grad


def test_shape_mismatch_names_op_and_shapes():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5)))
    with pytest.raises(T.ShapeError, match=r"add.*\(2, 3\).*\(4, 5\)"):
        T.add(a, b)


def test_untracked_leaf_grad_untouched():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=False)
    T.tsum(a * b).backward()
    assert b.grad is None and a.grad is not None


def test_forward_determinism():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((4, 4)).astype(np.float32))
        w = Tensor(rng.standard_normal((4, 4)).astype(np.float32))
        return T.softmax(T.gelu(x @ w), axis=-1).value
    a, b = run(), run()
    assert np.array_equal(a, b)
