import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from punet import tensor as T
from punet.errors import DomainError, GraphError, NumericalOverflow, ShapeMismatch
from punet.tensor import Tensor

from .conftest import central_diff


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_add_elementwise():
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_mul_by_ones_is_identity(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(T.mul(x, Tensor(np.ones((3, 4)))).data, x.data)


def test_grad_of_sum_of_product_matches_fd():
    a = leaf([0.3, 0.7])
    b = Tensor(np.array([2.0, 5.0]))
    T.sum_(T.mul(a, b)).backward()
    fd = central_diff(lambda v: float(np.sum(v * b.data)), a.data)
    np.testing.assert_allclose(a.grad, [2.0, 5.0], rtol=1e-12)
    np.testing.assert_allclose(a.grad, fd, rtol=1e-8)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_exp_log_inverse():
    np.testing.assert_allclose(T.exp(T.log(Tensor([2.0, 5.0]))).data, [2.0, 5.0], rtol=1e-15)


def test_softplus_at_zero():
    assert T.softplus(Tensor(0.0)).item() == pytest.approx(0.693147, abs=1e-6)


def test_clamp_min_values_and_subgradient():
    x = leaf([-1.0, 0.5])
    y = T.clamp_min(x, 0.1)
    np.testing.assert_allclose(y.data, [0.1, 0.5])
    T.sum_(y).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_clamp_min_exact_tie_goes_to_bound():
    x = leaf([0.1, 0.2])
    c = leaf(0.1)
    T.sum_(T.clamp_min(x, c)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])
    assert c.grad == 1.0


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, -2.0]))


def test_exp_overflow_raises():
    with pytest.raises(NumericalOverflow):
        T.exp(Tensor(np.array([1000.0])))


def test_relu():
    np.testing.assert_array_equal(T.relu(Tensor([-2.0, 3.0])).data, [0.0, 3.0])


def test_fanout_accumulates():
    x = leaf([1.5, -2.0])
    y = T.add(T.mul(x, x), x)  # x used three times
    T.sum_(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_repeated_backward_on_fresh_graphs_accumulates():
    x = leaf([1.0, 2.0])
    T.sum_(T.mul(x, 3.0)).backward()
    T.sum_(T.mul(x, 3.0)).backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_consumed_graph_raises():
    x = leaf([1.0, 2.0])
    loss = T.sum_(T.mul(x, x))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_retain_graph_allows_second_pass():
    x = leaf([1.0, 2.0])
    loss = T.sum_(T.mul(x, x))
    loss.backward(retain_graph=True)
    loss.backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_non_scalar_backward_raises():
    x = leaf([1.0, 2.0])
    with pytest.raises(GraphError):
        T.mul(x, x).backward()


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y.is_leaf


def test_dtype_preserved_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = T.softplus(T.mul(x, 2.0) + 1.0)
    assert y.dtype == np.float32
    T.sum_(y).backward()
    assert x.grad.dtype == np.float32


broadcast_pairs = hnp.mutually_broadcastable_shapes(num_shapes=2, min_dims=1, max_dims=3, max_side=4)


@given(shapes=broadcast_pairs, seed=st.integers(0, 2**16))
def test_broadcast_backward_sums_over_expanded_axes(shapes, seed):
    r = np.random.default_rng(seed)
    sa, sb = shapes.input_shapes
    a, b = leaf(r.normal(size=sa)), leaf(r.normal(size=sb))
    out = T.mul(a, b)
    g = r.normal(size=out.shape)
    T.sum_(T.mul(out, Tensor(g))).backward()
    expected = np.broadcast_to(b.data, out.shape) * g
    # reduce leading axes, then the size-1 axes of ``a``
    expected = expected.sum(axis=tuple(range(out.ndim - len(sa))))
    for ax, n in enumerate(sa):
        if n == 1:
            expected = expected.sum(axis=ax, keepdims=True)
    np.testing.assert_allclose(a.grad, expected, rtol=1e-10, atol=1e-12)


def test_determinism_bitwise(rng):
    data = rng.normal(size=(4, 5))

    def run():
        x = leaf(data)
        y = T.sum_(T.softplus(T.mul(x, x)))
        y.backward()
        return y.data.tobytes(), x.grad.tobytes()

    assert run() == run()
