import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scanmotion import tensor as tt
from scanmotion.tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    tensor,
)

from gradcheck import assert_close_grads, finite_difference

RNG = np.random.default_rng(0)


def rand(*shape, rng=RNG):
    return rng.uniform(-2.0, 2.0, size=shape)


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity():
    a = tensor([[1.0, 2.0], [3.0, 4.0]])
    out = tt.matmul(tensor(np.eye(2)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_hand_value():
    out = tt.matmul(tensor([[1.0, 2.0]]), tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        tt.matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 3))))


def test_add_and_broadcast():
    out = tt.add(tensor([1.0, 2.0]), tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])
    out = tt.add(tensor(np.ones((1, 2, 3))), tensor(np.ones((4, 2, 3))))
    assert out.shape == (4, 2, 3)
    with pytest.raises(ShapeError):
        tt.add(tensor(np.ones((2, 3))), tensor(np.ones((2, 4))))


def test_sigmoid_symmetry_point():
    assert tt.sigmoid(tensor(0.0)).item() == 0.5


def test_silu_value():
    # x * sigmoid(x) at x = 1
    expected = 1.0 / (1.0 + np.exp(-1.0))
    assert abs(tt.silu(tensor(1.0)).item() - expected) < 1e-15


def test_reciprocal_of_zero_raises():
    with pytest.raises(NonFiniteError):
        tt.reciprocal(tensor([1.0, 0.0]))


def test_expm1_div_limit_and_value():
    out = tt.expm1_div(tensor([0.0, 1e-12, 1.0]))
    np.testing.assert_allclose(out.data[:2], [1.0, 1.0], atol=1e-11)
    np.testing.assert_allclose(out.data[2], np.e - 1.0, rtol=1e-15)


def test_conv1d_identity_kernel():
    x = tensor(rand(5, 2, 3))
    out = tt.conv1d_depthwise(x, tensor(np.ones((3, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv1d_hand_value():
    x = tensor(np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1))
    k = tensor(np.array([[0.5, 0.5]]))
    out = tt.conv1d_depthwise(x, k)
    np.testing.assert_allclose(out.data.ravel(), [0.5, 0.5, 0.0])


def test_conv1d_zero_input():
    out = tt.conv1d_depthwise(tensor(np.zeros((4, 1, 2))), tensor(rand(2, 3)))
    assert np.all(out.data == 0.0)


def test_conv1d_bad_width():
    with pytest.raises(ShapeError):
        tt.conv1d_depthwise(tensor(np.zeros((4, 1, 2))), tensor(np.zeros((2, 0))))


def test_layernorm_constant_collapses_to_zero():
    x = tensor(np.full((2, 4), 3.7))
    out = tt.layernorm(x, tensor(np.ones(4)), tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layernorm_two_point_closed_form():
    out = tt.layernorm(tensor([1.0, -1.0]), tensor(np.ones(2)), tensor(np.zeros(2)))
    expected = 1.0 / np.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out.data, [expected, -expected], rtol=1e-15)


def test_layernorm_bias_only():
    x = tensor(rand(3, 5))
    b = rand(5)
    out = tt.layernorm(x, tensor(np.zeros(5)), tensor(b))
    np.testing.assert_allclose(out.data, np.broadcast_to(b, (3, 5)))


def test_softmax_rows_sum_to_one():
    s = tt.softmax(tensor(rand(4, 7)))
    np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)


def test_nonfinite_forward_raises():
    with pytest.raises(NonFiniteError):
        tt.exp(tensor(1e6))


# ---------------------------------------------------------------------------
# backward basics


def test_backward_sum_gives_ones():
    x = tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(tt.tsum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_quadratic():
    x = tensor([1.0, 2.0], requires_grad=True)
    backward(tt.tsum(tt.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = tensor([1.0, 2.0], requires_grad=True)
    y = tt.mul(x, x)
    with pytest.raises(ShapeError):
        backward(y)
    backward(tt.tsum(y))  # leave the tape clean


def test_backward_twice_is_error():
    x = tensor([1.0, 2.0], requires_grad=True)
    loss = tt.tsum(tt.mul(x, x))
    backward(loss)
    with pytest.raises(RuntimeError):
        backward(loss)


def test_backward_returns_gradient_map():
    x = tensor([1.0, 2.0], requires_grad=True)
    loss = tt.tsum(tt.scale(x, 3.0))
    grads = backward(loss)
    np.testing.assert_array_equal(grads[x], [3.0, 3.0])


def test_grad_accumulates_across_reuse():
    x = tensor([1.0, 2.0], requires_grad=True)
    loss = tt.tsum(tt.add(tt.mul(x, x), x))
    backward(loss)
    np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_no_grad_suppresses_recording():
    x = tensor([1.0], requires_grad=True)
    with tt.no_grad():
        y = tt.mul(x, x)
    assert not y.requires_grad
    assert len(tt.get_default_tape().entries) == 0


def test_tape_topological_order():
    x = tensor([1.0], requires_grad=True)
    y = tt.mul(x, x)
    z = tt.add(y, x)
    loss = tt.tsum(z)
    entries = tt.get_default_tape().entries
    pos = {id(e.out): i for i, e in enumerate(entries)}
    for i, e in enumerate(entries):
        for inp in e.inputs:
            if id(inp) in pos:
                assert pos[id(inp)] < i
    backward(loss)


# ---------------------------------------------------------------------------
# immutability / aliasing


def test_constructor_copies_and_freezes():
    buf = np.ones(3)
    t = tensor(buf)
    buf[0] = 99.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_broadcast_output_owns_storage():
    a = tensor(np.ones((1, 3)))
    b = tensor(np.ones((4, 3)), requires_grad=True)
    out = tt.add(a, b)
    before = out.data.copy()
    b2 = tensor(np.zeros((4, 3)))  # unrelated allocation; out must not move
    np.testing.assert_array_equal(out.data, before)
    assert not out.data.flags.writeable
    backward(tt.tsum(out))


def test_forward_determinism():
    x = rand(6, 5)
    w = rand(5, 4)
    a = tt.matmul(tensor(x), tensor(w)).data
    b = tt.matmul(tensor(x), tensor(w)).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# finite-difference checks for every registered op

def _fd_case(name, build, arrays):
    """build(tensors) -> output Tensor; arrays are the leaf values."""
    rng = np.random.default_rng(hash(name) % (2**32))
    leaves = [tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    w = rng.standard_normal(out.shape)
    loss = tt.tsum(tt.mul(out, tensor(w)))
    backward(loss)

    def f(*vals):
        with tt.no_grad():
            res = build(*[tensor(v) for v in vals])
        return float((res.data * w).sum())

    numeric = finite_difference(f, [np.asarray(a, dtype=np.float64) for a in arrays])
    for leaf, num in zip(leaves, numeric):
        assert_close_grads(leaf.grad, num, label=name)


FD_CASES = {
    "add": (tt.add, [rand(3, 4), rand(3, 4)]),
    "add_broadcast": (tt.add, [rand(1, 4), rand(5, 4)]),
    "sub": (tt.sub, [rand(2, 3), rand(2, 3)]),
    "mul": (tt.mul, [rand(4, 2), rand(4, 2)]),
    "mul_broadcast": (tt.mul, [rand(2, 1, 3), rand(2, 5, 3)]),
    "neg": (tt.neg, [rand(6)]),
    "scale": (lambda t: tt.scale(t, -1.7), [rand(3, 3)]),
    "exp": (tt.exp, [rand(4, 4) * 0.5]),
    "reciprocal": (tt.reciprocal, [rand(3, 3) + 3.0]),
    "sigmoid": (tt.sigmoid, [rand(5, 2)]),
    "silu": (tt.silu, [rand(5, 2)]),
    "softplus": (tt.softplus, [rand(5, 2)]),
    "expm1_div": (tt.expm1_div, [rand(4, 4)]),
    "expm1_div_near_zero": (tt.expm1_div, [rand(8) * 1e-4]),
    "matmul": (tt.matmul, [rand(3, 4), rand(4, 2)]),
    "matmul_batched": (tt.matmul, [rand(2, 3, 4), rand(2, 4, 2)]),
    "matmul_bcast": (tt.matmul, [rand(5, 3, 4), rand(4, 2)]),
    "conv1d": (tt.conv1d_depthwise, [rand(6, 2, 3), rand(3, 4)]),
    "conv1d_wide": (tt.conv1d_depthwise, [rand(3, 1, 2), rand(2, 5)]),
    "layernorm": (tt.layernorm, [rand(4, 6), rand(6), rand(6)]),
    "softmax": (tt.softmax, [rand(3, 5)]),
    "sum_all": (tt.tsum, [rand(3, 4)]),
    "sum_axis": (lambda t: tt.tsum(t, axis=1), [rand(3, 4, 2)]),
    "sum_keepdims": (lambda t: tt.tsum(t, axis=(0, 2), keepdims=True), [rand(3, 4, 2)]),
    "mean_all": (tt.tmean, [rand(4, 4)]),
    "mean_axis": (lambda t: tt.tmean(t, axis=-1), [rand(2, 5)]),
    "reshape": (lambda t: tt.reshape(t, (6, 2)), [rand(3, 4)]),
    "transpose": (lambda t: tt.transpose(t, (2, 0, 1)), [rand(2, 3, 4)]),
    "concat": (lambda a, b: tt.concat([a, b], axis=1), [rand(2, 3), rand(2, 2)]),
    "narrow": (lambda t: tt.narrow(t, 1, 1, 3), [rand(2, 5)]),
    "flip": (lambda t: tt.flip(t, axis=0), [rand(4, 2)]),
    "gather_rows": (
        lambda t: tt.gather_rows(t, np.array([0, 2, 2, 1])),
        [rand(4, 3)],
    ),
}


@pytest.mark.parametrize("name", sorted(FD_CASES))
def test_gradients_match_finite_differences(name):
    build, arrays = FD_CASES[name]
    _fd_case(name, build, arrays)


@settings(max_examples=20, deadline=None)
@given(
    t=st.integers(1, 8),
    b=st.integers(1, 8),
    e=st.integers(1, 8),
    seed=st.integers(0, 2**31 - 1),
)
def test_random_shape_gradients(t, b, e, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=(t, b, e))
    y = rng.uniform(-2, 2, size=(1, b, e))
    _fd_case(
        f"mix_{seed}",
        lambda a, c: tt.silu(tt.mul(tt.add(a, c), a)),
        [x, y],
    )
