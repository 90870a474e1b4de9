import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ut_transfer import tensor as T
from ut_transfer.tensor import ShapeError, Tensor

import _cases


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for f in range(o):
            for r in range(oh):
                for q in range(ow):
                    patch = xp[i, :, r * stride:r * stride + kh, q * stride:q * stride + kw]
                    out[i, f, r, q] = (patch * w[f]).sum() + (b[f] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_naive_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    for _ in range(5):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                       stride=stride, padding=padding).data
        np.testing.assert_allclose(got, naive_conv(x, w, b, stride, padding), atol=1e-5, rtol=0)


def test_identity_maps_are_bit_stable():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3)).astype(np.float32)
    assert np.array_equal(T.matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(a)).data, a)
    x = rng.random((2, 1, 5, 5)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), dtype=np.float32)))
    assert out.shape == x.shape and np.array_equal(out.data, x)


def test_sign_of_zero_is_zero():
    assert T.sign(Tensor([-2.5, 0.0, 7.0])).data.tolist() == [-1.0, 0.0, 1.0]


def test_cross_entropy_closed_forms():
    assert math.isclose(T.cross_entropy(Tensor(np.zeros((1, 10))), [3]).item(), math.log(10), rel_tol=1e-6)
    logits = np.zeros((1, 10))
    logits[0, 4] = 1000.0
    assert abs(T.cross_entropy(Tensor(logits), [4]).item()) < 1e-6
    assert math.isclose(T.cross_entropy(Tensor([[1.0, 2.0]]), [0]).item(), math.log(1 + math.e), rel_tol=1e-6)
    assert math.isclose(math.log(1 + math.e), 1.313262, abs_tol=1e-6)


def test_cross_entropy_reductions_and_label_errors():
    rng = np.random.default_rng(1)
    z = Tensor(rng.normal(size=(4, 3)))
    y = [0, 2, 1, 1]
    assert math.isclose(T.cross_entropy(z, y, reduction="sum").item(), 4 * T.cross_entropy(z, y).item(), rel_tol=1e-6)
    with pytest.raises(IndexError, match="3"):
        T.cross_entropy(z, [0, 3, 1, 1])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    p = T.softmax(Tensor(rng.normal(scale=20, size=(16, 7)))).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_backward_simple_cases():
    x = Tensor(3.0, requires_grad=True)
    T.mul(x, x).backward()
    assert x.grad == pytest.approx(6.0)
    v = Tensor([-1.0, 2.0], requires_grad=True)
    T.tensor_sum(T.relu(v)).backward()
    assert v.grad.tolist() == [0.0, 1.0]


def test_diamond_graph_sums_contributions(f64):
    # loss = sum(a*b + a), b = a*a: dl/da = 3a^2 + 1
    a = Tensor(np.array([0.5, -2.0, 3.0]), requires_grad=True)
    b = T.mul(a, a)
    T.tensor_sum(T.add(T.mul(a, b), a)).backward()
    np.testing.assert_allclose(a.grad, 3 * a.data ** 2 + 1)


def test_gradients_accumulate_across_backward_calls():
    a = Tensor([1.0, 2.0], requires_grad=True)
    T.tensor_sum(T.scale(a, 2.0)).backward()
    T.tensor_sum(T.scale(a, 2.0)).backward()
    assert a.grad.tolist() == [4.0, 4.0]
    a.zero_grad()
    assert a.grad is None


def test_backward_errors():
    with pytest.raises(ShapeError):
        T.relu(Tensor([1.0, 2.0], requires_grad=True)).backward()
    with pytest.raises(RuntimeError):
        T.tensor_sum(Tensor([1.0])).backward()


def test_no_broadcasting_beyond_scalars():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_values_raise():
    with pytest.raises(FloatingPointError):
        Tensor([1.0, np.nan])


def test_no_grad_records_nothing():
    a = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        out = T.scale(a, 2.0)
    assert not out.requires_grad and T.is_grad_enabled()


def test_precision_context():
    assert T.get_default_dtype() == np.float32
    with T.precision(np.float64):
        assert Tensor([1]).dtype == np.float64
    assert Tensor([1]).dtype == np.float32
    with pytest.raises(ValueError):
        with T.precision(np.float16):
            pass


def test_finite_difference_oracle_basics():
    x = np.random.default_rng(0).normal(size=(2, 3))
    np.testing.assert_allclose(T.finite_difference_gradient(lambda v: float(v.sum()), x), np.ones_like(x), atol=1e-9)
    g = T.finite_difference_gradient(lambda v: float(v[0] ** 2), np.array([3.0]), h=0.01)
    assert abs(g[0] - 6.0) < 1e-9


def test_per_example_fd_matches_scalar_fd():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=3)
    f = lambda v: (np.tanh(v) @ w) ** 2  # noqa: E731
    per = T.per_example_fd_gradient(f, x, h=1e-5)
    for i in range(4):
        single = T.finite_difference_gradient(lambda v: float(f(v[None])[0]), x[i])
        np.testing.assert_allclose(per[i], single, atol=1e-8)


def test_mlp_backward_matches_finite_differences(f64):
    assert _cases.network_error(0, 4, np.float64) < 1e-6


@pytest.mark.parametrize("name", sorted(_cases.PRIMITIVES))
def test_primitive_gradients(name):
    assert _cases.primitive_error(name, 0, np.float64) < 1e-6
    assert _cases.primitive_error(name, 1, np.float32) < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(0, 2), st.integers(1, 3))
def test_conv_output_shape(c, o, size, padding, stride):
    k = 3
    if size + 2 * padding < k:
        return
    x = Tensor(np.zeros((1, c, size, size)))
    out = T.conv2d(x, Tensor(np.zeros((o, c, k, k))), stride=stride, padding=padding)
    assert out.shape == (1, o, (size + 2 * padding - k) // stride + 1, (size + 2 * padding - k) // stride + 1)
