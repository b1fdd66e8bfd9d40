import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singerlab import tensor as T
from singerlab.tensor import NonFiniteError, ShapeError, Tensor

from .oracles import finite_difference, loop_matmul


def check_grad(fn, *shapes, seed=0, tol=1e-6, positive=False):
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*leaves)
    T.sum_(out).backward() if out.data.size > 1 else out.backward()
    for i, leaf in enumerate(leaves):

        def f(x, i=i):
            args = [Tensor(a, dtype=np.float64) for a in arrays]
            args[i] = Tensor(x, dtype=np.float64)
            return float(np.sum(fn(*args).data))

        num = finite_difference(f, arrays[i])
        np.testing.assert_allclose(leaf.grad, num, rtol=tol, atol=tol)


@pytest.mark.parametrize(
    "name,fn,shapes",
    [
        ("add_broadcast", lambda a, b: a + b, [(3, 4), (4,)]),
        ("sub", lambda a, b: a - b, [(2, 3), (2, 3)]),
        ("mul_broadcast", lambda a, b: a * b, [(2, 3, 4), (1, 3, 1)]),
        ("matmul_3d_2d", lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
        ("matmul_batched", lambda a, b: a @ b, [(2, 3, 4), (2, 4, 2)]),
        ("gelu", lambda a: T.gelu(a), [(3, 5)]),
        ("softmax", lambda a: T.softmax(a) * Tensor(np.arange(4.0)), [(3, 4)]),
        ("transpose", lambda a: T.transpose(a, (1, 0, 2)) * Tensor(np.arange(24.0).reshape(3, 2, 4)), [(2, 3, 4)]),
        ("getitem_slice", lambda a: a[:, 1:] * 2.0, [(3, 4)]),
        ("gather_repeat", lambda a: T.gather(a, np.array([0, 2, 2])), [(3, 2)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1) * Tensor(np.arange(10.0)), [(2, 4), (2, 6)]),
        ("mean_axis", lambda a: T.mean(a, axis=0), [(3, 4)]),
        ("row_norm", lambda a: T.row_norm(a), [(4, 3)]),
        ("mse", lambda a, b: T.mse(a, b), [(3, 4), (3, 4)]),
        ("layernorm", lambda x, w, b: T.layernorm(x, w, b) * Tensor(np.arange(5.0)), [(2, 3, 5), (5,), (5,)]),
    ],
)
def test_gradients_match_finite_differences(name, fn, shapes):
    check_grad(fn, *shapes)


def test_div_sqrt_log_gradients():
    check_grad(lambda a, b: a / b, (3, 3), (3, 3), positive=True)
    check_grad(lambda a: T.sqrt(a), (4,), positive=True)
    check_grad(lambda a: T.log(a) + T.exp(a), (4,), positive=True)


def test_cross_entropy_gradient():
    labels = np.array([0, 2, 1])
    check_grad(lambda z: T.cross_entropy(z, labels), (3, 4))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose((Tensor(a, dtype=np.float64) @ Tensor(b, dtype=np.float64)).data,
                               loop_matmul(a, b), rtol=1e-12)


def test_gelu_tanh_reference_values():
    x = Tensor(np.array([-2.0, 0.0, 1.0]), dtype=np.float64)
    expected = [T.gelu_scalar(v) for v in (-2.0, 0.0, 1.0)]
    np.testing.assert_allclose(T.gelu(x).data, expected, rtol=1e-12)
    assert abs(T.gelu_scalar(1.0) - 0.8411919906) < 1e-9


def test_shared_node_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    y = x * x + x
    y.backward()
    assert x.grad[0] == pytest.approx(5.0)


def test_backward_accumulates_across_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.sum_(x * 3.0).backward()
    T.sum_(x * 3.0).backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(RuntimeError):
        y.backward()


def test_non_finite_detected():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan]))
    big = Tensor(np.array([1e30], dtype=np.float32))
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        big * big
    with pytest.raises(NonFiniteError):
        Tensor(np.ones(2)) / Tensor(np.zeros(2))


def test_large_finite_values_are_accepted():
    x = Tensor(np.full(4, 3e38, dtype=np.float32))
    assert np.isfinite(x.data).all()


def test_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeError):
        T.mse(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert (Tensor(np.ones(2, np.float32)) * 2.0).dtype == np.float32
    assert Tensor(np.ones(2)).dtype == np.float64


@settings(max_examples=50, deadline=None)
@given(
    shape=st.lists(st.integers(1, 4), min_size=1, max_size=3),
    mask=st.lists(st.booleans(), min_size=3, max_size=3),
    lead=st.integers(0, 2),
)
def test_unbroadcast_inverts_broadcast(shape, mask, lead):
    small = tuple(1 if m else n for n, m in zip(shape, mask))
    big = (2,) * lead + tuple(shape)
    g = np.random.default_rng(0).standard_normal(big)
    out = T.unbroadcast(g, small)
    assert out.shape == small
    # summing the broadcast gradient preserves the total
    assert np.isclose(out.sum(), g.sum())
