"""Dense float64 arrays with tape-based reverse-mode differentiation.

Everything downstream (scans, blocks, the denoiser, the VAE) is expressed in
the primitives defined here.  Design constraints the rest of the package
relies on:

* all data is contiguous row-major float64; any op that produces a NaN or
  Inf raises ``NonFiniteError`` instead of propagating it silently,
* tensors are immutable from the caller's perspective (the backing array is
  marked read-only; ``Tensor.assign_`` exists only for optimizer updates on
  leaves),
* executed ops are appended to a process-wide ``ComputationTape`` in
  execution order, which is a topological order by construction; calling
  ``backward`` consumes the tape, so a second call without a fresh forward
  pass is an error.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "constant",
    "apply_op",
    "backward",
    "no_grad",
    "grad_enabled",
    "get_default_tape",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "exp",
    "expm1_div",
    "reciprocal",
    "sigmoid",
    "silu",
    "softplus",
    "matmul",
    "conv1d_depthwise",
    "layernorm",
    "softmax",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "flip",
    "gather_rows",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's precondition."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf, or was fed a value outside its domain."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _check_finite(a: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{opname} produced a non-finite value")


class _Entry:
    """One executed op: inputs, output, and the rule producing input grads."""

    __slots__ = ("name", "inputs", "out", "bwd", "consumed")

    def __init__(self, name, inputs, out, bwd):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.bwd = bwd
        self.consumed = False


class ComputationTape:
    """Append-only record of executed ops, in execution (topological) order."""

    def __init__(self) -> None:
        self.entries: list[_Entry] = []

    def record(self, entry: _Entry) -> None:
        self.entries.append(entry)

    def clear(self) -> None:
        for e in self.entries:
            e.consumed = True
            e.inputs = ()
            e.bwd = None
            e.out = None
        self.entries = []


_TAPE = ComputationTape()
_GRAD_ENABLED = True


def get_default_tape() -> ComputationTape:
    return _TAPE


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable tape recording inside the block (eval / sampling / benchmarks)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Immutable dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_entry")

    def __init__(self, data, requires_grad: bool = False, _view: np.ndarray | None = None):
        if _view is not None:
            a = _view
        else:
            a = _as_array(data).copy()
        a.setflags(write=False)
        self.data: np.ndarray = a
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._entry: _Entry | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def assign_(self, new_data: np.ndarray) -> None:
        """Replace the leaf's value in place (optimizer updates only)."""
        if self._entry is not None:
            raise RuntimeError("assign_ is only valid on leaf tensors")
        a = _as_array(new_data)
        if a.shape != self.data.shape:
            raise ShapeError(f"assign_ shape {a.shape} != {self.data.shape}")
        _check_finite(a, "assign_")
        a = a.copy()
        a.setflags(write=False)
        self.data = a

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; every path goes through the module-level ops
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = Tensor(data, requires_grad=requires_grad)
    _check_finite(t.data, "tensor")
    return t


def constant(data) -> Tensor:
    return tensor(data, requires_grad=False)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def apply_op(
    name: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    bwd: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap a forward result as a Tensor, recording ``bwd`` when tracking.

    ``bwd`` receives the output gradient and returns one gradient array (or
    None) per input, in order.  This is the extension point used by the
    fused scan kernels in :mod:`scanmotion.ssm`.
    """
    out_data = np.asarray(out_data, dtype=np.float64)
    if out_data.ndim and not out_data.flags["C_CONTIGUOUS"]:
        out_data = np.ascontiguousarray(out_data)
    _check_finite(out_data, name)
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out_data.setflags(write=False)
    out.data = out_data
    out.requires_grad = track
    out.grad = None
    out._entry = None
    if track:
        entry = _Entry(name, tuple(inputs), out, bwd)
        out._entry = entry
        _TAPE.record(entry)
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/dt into ``t.grad`` for every tracked tensor.

    Returns the gradient map.  The tape is consumed: a second call without
    a new forward pass raises RuntimeError.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing to differentiate")
    if loss._entry is not None and loss._entry.consumed:
        raise RuntimeError("backward already called on this tape; run a new forward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    entries = _TAPE.entries
    for entry in reversed(entries):
        g = grads.get(id(entry.out))
        if g is None:
            continue
        in_grads = entry.bwd(g)
        for t, gi in zip(entry.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float64)
            if gi.shape != t.data.shape:
                raise ShapeError(
                    f"{entry.name} backward produced grad shape {gi.shape} "
                    f"for input shape {t.data.shape}"
                )
            _check_finite(gi, entry.name + ".backward")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                by_id[key] = t
    result: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = by_id[key]
        t.grad = g if t.grad is None else t.grad + g
        result[t] = g
    _TAPE.clear()
    return result


# ---------------------------------------------------------------------------
# broadcasting helpers

def _broadcast_shapes(sa: tuple, sb: tuple, opname: str) -> tuple:
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError as exc:
        raise ShapeError(f"{opname}: shapes {sa} and {sb} do not broadcast") from exc


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(name, a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    _broadcast_shapes(a.shape, b.shape, name)
    out = fwd(a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(da(g, a.data, b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(db(g, a.data, b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(name, (a, b), out, bwd)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return apply_op("scale", (a,), a.data * s, lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return apply_op("exp", (a,), out, lambda g: (g * out,))


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0.0):
        raise NonFiniteError("reciprocal of exact zero")
    out = 1.0 / a.data
    return apply_op("reciprocal", (a,), out, lambda g: (-g * out * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return apply_op("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def bwd(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return apply_op("silu", (a,), out, bwd)


def softplus(a: Tensor) -> Tensor:
    # log1p(exp(x)) for x<=0 and x + log1p(exp(-x)) for x>0: stable both ways
    x = a.data
    out = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))

    def bwd(g):
        return (g * _sigmoid(x),)

    return apply_op("softplus", (a,), out, bwd)


def _expm1_div_value(u: np.ndarray) -> np.ndarray:
    """(exp(u) - 1) / u with the analytic limit 1 + u/2 used for |u| < 1e-8."""
    small = np.abs(u) < 1e-8
    safe = np.where(small, 1.0, u)
    out = np.where(small, 1.0 + 0.5 * u, np.expm1(safe) / safe)
    return out


def _expm1_div_deriv(u: np.ndarray) -> np.ndarray:
    # d/du[(e^u-1)/u] = (e^u (u-1) + 1) / u^2; series below 1e-3 avoids cancellation
    small = np.abs(u) < 1e-3
    safe = np.where(small, 1.0, u)
    series = 0.5 + u / 3.0 + u * u / 8.0 + u * u * u / 30.0
    return np.where(small, series, (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe))


def expm1_div(a: Tensor) -> Tensor:
    """Elementwise (exp(x) - 1)/x, the zero-order-hold input factor."""
    u = a.data
    out = _expm1_div_value(u)

    def bwd(g):
        return (g * _expm1_div_deriv(u),)

    return apply_op("expm1_div", (a,), out, bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    _broadcast_shapes(a.shape[:-2], b.shape[:-2], "matmul")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply_op("matmul", (a, b), out, bwd)


def conv1d_depthwise(x: Tensor, kernel: Tensor) -> Tensor:
    """Causal per-channel convolution over the leading (time) axis.

    x is (T, B, E), kernel is (E, w); y[t] = sum_j kernel[:, j] * x[t - j]
    with x[t<0] treated as zero.
    """
    if x.ndim != 3 or kernel.ndim != 2:
        raise ShapeError("conv1d_depthwise expects x (T,B,E) and kernel (E,w)")
    t_len, _, e = x.shape
    ek, w = kernel.shape
    if ek != e:
        raise ShapeError(f"kernel channels {ek} != input channels {e}")
    if w < 1:
        raise ShapeError("kernel width must be >= 1")
    xd, kd = x.data, kernel.data
    out = np.zeros_like(xd)
    for j in range(min(w, t_len)):
        if j == 0:
            out += kd[:, 0] * xd
        else:
            out[j:] += kd[:, j] * xd[:-j]

    def bwd(g):
        gx = gk = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for j in range(min(w, t_len)):
                if j == 0:
                    gx += kd[:, 0] * g
                else:
                    gx[:-j] += kd[:, j] * g[j:]
        if kernel.requires_grad:
            gk = np.zeros_like(kd)
            for j in range(min(w, t_len)):
                if j == 0:
                    gk[:, 0] = np.einsum("tbe,tbe->e", g, xd)
                else:
                    gk[:, j] = np.einsum("tbe,tbe->e", g[j:], xd[:-j])
        return gx, gk

    return apply_op("conv1d_depthwise", (x, kernel), out, bwd)


_LN_EPS = 1e-5


def layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply affine."""
    e = x.shape[-1]
    if gain.shape != (e,) or bias.shape != (e,):
        raise ShapeError(f"layernorm affine params must have shape ({e},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def bwd(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            # standard layernorm adjoint over the last axis
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gh - m1 - xhat * m2)
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, e).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, e).sum(axis=0)
        return gx, ggain, gbias

    return apply_op("layernorm", (x, gain, bias), out, bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    s = ez / ez.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return apply_op("softmax", (a,), s, bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return apply_op("sum", (a,), out, bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return apply_op("mean", (a,), out, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape).copy()

    def bwd(g):
        return (g.reshape(a.shape),)

    return apply_op("reshape", (a,), out, bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes).copy()
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv).copy(),)

    return apply_op("transpose", (a,), out, bwd)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        grads = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)].copy())
        return grads

    return apply_op("concat", tuple(parts), out, bwd)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    out = a.data[tuple(idx)].copy()

    def bwd(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[tuple(idx)] = g
        return (full,)

    return apply_op("narrow", (a,), out, bwd)


def flip(a: Tensor, axis: int = 0) -> Tensor:
    out = np.flip(a.data, axis=axis).copy()

    def bwd(g):
        return (np.flip(g, axis=axis).copy(),)

    return apply_op("flip", (a,), out, bwd)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-D table; backward scatter-adds into the table."""
    if table.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D table")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("gather_rows index out of range")
    out = table.data[idx].copy()

    def bwd(g):
        gt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(gt, idx, g)
        return (gt,)

    return apply_op("gather_rows", (table,), out, bwd)
