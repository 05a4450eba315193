"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation whose inputs include a watched
tensor.  Tensors created without a tape are constants: operations on
constants only are evaluated eagerly and never recorded, which is how model
code evaluates frozen networks.

Broadcasting is deliberately narrow.  Binary elementwise operations accept
equal shapes, a 0-d operand, or an operand whose shape equals the other's
shape without its leading (batch) axis.  Anything else raises
:class:`ContractViolation` naming both shapes.

Example
-------
>>> tape = Tape()
>>> x = tape.watch(np.array(3.0))
>>> y = x * x
>>> tape.gradient(y, [x])[0]
array(6.)
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation

__all__ = [
    "Tensor", "Tape", "constant", "set_debug", "debug_enabled",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "square",
    "absolute", "tanh", "sin", "cos", "leaky_relu", "relu", "matmul", "transpose",
    "reshape", "sum", "mean", "logsumexp", "l1norm", "l2norm_squared",
    "pick", "concat", "scale_rows", "channel_affine", "batch_norm_train",
    "conv2d", "conv_transpose2d", "conv_output_size",
    "conv_transpose_output_size", "global_avg_pool",
    "GradCheckReport", "gradient_check",
]

_DEBUG = os.environ.get("MANIFOLD_GAN_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle the per-operation finiteness assertion."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


class Tensor:
    """A dense array, optionally bound to a node of a :class:`Tape`."""

    __slots__ = ("values", "tape", "node")
    __array_priority__ = 100

    def __init__(self, values, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(values)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        where = f"node={self.node}" if self.node is not None else "constant"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(values, dtype=None) -> Tensor:
    arr = np.asarray(values, dtype=dtype)
    return Tensor(arr)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class _Record:
    op: str
    inputs: tuple  # node ids, None for constants
    output: int
    vjp: Callable


class Tape:
    """Ordered record of operations, replayed backwards by :meth:`backward`."""

    def __init__(self):
        self.records: list[_Record] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self.records)

    def _new_node(self) -> int:
        node = self._next
        self._next += 1
        return node

    def watch(self, values) -> Tensor:
        """Create a leaf node whose gradient will be tracked."""
        arr = values.values if isinstance(values, Tensor) else values
        return Tensor(np.asarray(arr), tape=self, node=self._new_node())

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(node) to every node reachable from ``loss``."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ContractViolation("loss is not a node on this tape")
        if loss.shape != ():
            raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=loss.dtype)}
        for rec in reversed(self.records):
            g = grads.get(rec.output)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for node, gi in zip(rec.inputs, in_grads):
                if node is None or gi is None:
                    continue
                prev = grads.get(node)
                grads[node] = gi if prev is None else prev + gi
        return grads

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` w.r.t. each source; zeros for unreached sources."""
        for s in sources:
            if s.tape is not self or s.node is None:
                raise ContractViolation("gradient source is not a node on this tape")
        grads = self.backward(loss)
        return [grads[s.node] if s.node in grads else np.zeros_like(s.values)
                for s in sources]


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractViolation(f"{op}: operands belong to different tapes")
            tape = t.tape
    if _DEBUG and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(t.values)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    if tape is None:
        return Tensor(out)
    node = tape._new_node()
    tape.records.append(_Record(op, tuple(t.node for t in inputs), node, vjp))
    return Tensor(out, tape=tape, node=node)


# -- broadcasting --------------------------------------------------------

def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) >= 1 and sa[1:] == sb:
        return
    if len(sb) >= 1 and sb[1:] == sa:
        return
    raise ContractViolation(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.values + b.values,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.values - b.values,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values
    return _record("mul", (a, b), av * bv,
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("div", a, b)
    av, bv = a.values, b.values
    out = av / bv
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * out / bv, bv.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.values, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.values
    return _record("log", (a,), np.log(av), lambda g: (g / av,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.values)
    return _record("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


def square(a: Tensor) -> Tensor:
    av = a.values
    return _record("square", (a,), av * av, lambda g: (2.0 * g * av,))


def absolute(a: Tensor) -> Tensor:
    av = a.values
    return _record("abs", (a,), np.abs(av), lambda g: (g * np.sign(av),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sin(a: Tensor) -> Tensor:
    av = a.values
    return _record("sin", (a,), np.sin(av), lambda g: (g * np.cos(av),))


def cos(a: Tensor) -> Tensor:
    av = a.values
    return _record("cos", (a,), np.cos(av), lambda g: (-g * np.sin(av),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    av = a.values
    pos = av >= 0
    slope = np.asarray(slope, dtype=av.dtype)
    out = np.where(pos, av, slope * av)
    return _record("leaky_relu", (a,), out, lambda g: (np.where(pos, g, slope * g),))


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


# -- shape and linear algebra ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return _record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.transpose(a.values, axes),
                   lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as exc:
        raise ContractViolation(f"reshape: cannot reshape {old} into {shape}") from exc
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ContractViolation(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = np.sum(a.values, axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record("sum", (a,), np.asarray(out), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ContractViolation("mean over an empty axis")
    return sum(a, axes, keepdims) * (1.0 / count)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(a))) along ``axis`` using the max-shift identity."""
    (ax,) = _norm_axes(axis, a.ndim)
    if a.shape[ax] == 0:
        raise ContractViolation("logsumexp over an empty axis")
    av = a.values
    m = np.max(av, axis=ax, keepdims=True)
    shifted = np.exp(av - m)
    s = np.sum(shifted, axis=ax, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=ax)
    soft = shifted / s
    return _record("logsumexp", (a,), out,
                   lambda g: (np.expand_dims(g, ax) * soft,))


def l1norm(a: Tensor) -> Tensor:
    return sum(absolute(a))


def l2norm_squared(a: Tensor) -> Tensor:
    return sum(square(a))


def pick(a: Tensor, index) -> Tensor:
    """Select ``a[i, index[i]]`` for every row of a 2-d tensor."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ContractViolation(f"pick: incompatible shapes {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, index] = g
        return (out,)

    return _record("pick", (a,), a.values[rows, index], vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", tensors, out,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply slice ``a[i]`` by scalar ``s[i]``."""
    if s.ndim != 1 or a.ndim < 1 or s.shape[0] != a.shape[0]:
        raise ContractViolation(f"scale_rows: incompatible shapes {a.shape} and {s.shape}")
    av, sv = a.values, s.values
    sb = sv.reshape((-1,) + (1,) * (av.ndim - 1))
    other = tuple(range(1, av.ndim))
    return _record("scale_rows", (a, s), av * sb,
                   lambda g: (g * sb, np.sum(g * av, axis=other)))


def channel_affine(a: Tensor, scale: Tensor | None, shift: Tensor | None) -> Tensor:
    """``a * scale[c] + shift[c]`` along axis 1 (the channel/feature axis)."""
    if a.ndim < 2:
        raise ContractViolation(f"channel_affine needs a batched tensor, got {a.shape}")
    c = a.shape[1]
    for name, p in (("scale", scale), ("shift", shift)):
        if p is not None and p.shape != (c,):
            raise ContractViolation(f"channel_affine: {name} shape {p.shape} vs input {a.shape}")
    view = (1, c) + (1,) * (a.ndim - 2)
    red = (0,) + tuple(range(2, a.ndim))
    av = a.values
    out = av
    if scale is not None:
        sv = scale.values.reshape(view)
        out = out * sv
    if shift is not None:
        out = out + shift.values.reshape(view)
    inputs = [a] + [p for p in (scale, shift) if p is not None]

    def vjp(g):
        grads = [g * sv if scale is not None else g]
        if scale is not None:
            grads.append(np.sum(g * av, axis=red))
        if shift is not None:
            grads.append(np.sum(g, axis=red))
        return tuple(grads)

    return _record("channel_affine", inputs, out, vjp)


def batch_norm_train(a: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalise with batch statistics along every axis except 1.

    Returns the output tensor plus the (mean, biased variance) arrays used,
    so the caller can update running statistics.
    """
    if a.shape[0] < 2:
        raise ContractViolation("batch-norm in train mode needs batch >= 2")
    red = (0,) + tuple(range(2, a.ndim))
    view = (1, a.shape[1]) + (1,) * (a.ndim - 2)
    av = a.values
    mu = av.mean(axis=red, keepdims=True)
    var = ((av - mu) ** 2).mean(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (av - mu) * inv
    gv = gamma.values.reshape(view)
    out = xhat * gv + beta.values.reshape(view)

    def vjp(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=red, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=red, keepdims=True))
        return dx, np.sum(g * xhat, axis=red), np.sum(g, axis=red)

    y = _record("batch_norm", (a, gamma, beta), out, vjp)
    return y, mu.reshape(-1), var.reshape(-1)


# -- convolution ---------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, pad: int,
                               output_pad: int = 0) -> int:
    return (size - 1) * stride + kernel - 2 * pad + output_pad


def _windows(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :oh, :ow]


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv_fwd(x, w, stride, pad):
    k = w.shape[2]
    oh = conv_output_size(x.shape[2], k, stride, pad)
    ow = conv_output_size(x.shape[3], k, stride, pad)
    win = _windows(_pad(x, pad), k, stride, oh, ow)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), win


def _conv_dx(g, w, x_shape, stride, pad):
    b, c, h, wd = x_shape
    k = w.shape[2]
    oh, ow = g.shape[2], g.shape[3]
    dwin = np.tensordot(g, w, axes=([1], [0]))  # (b, oh, ow, c, k, k)
    dxp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * (oh - 1) + 1:stride,
                j:j + stride * (ow - 1) + 1:stride] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pad:pad + h, pad:pad + wd]


def _check_conv(op, x, w, stride, pad):
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ContractViolation(f"{op}: expected 4-d input and square 4-d kernel, "
                                f"got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ContractViolation(f"{op}: stride must be >= 1 and pad >= 0")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[b, c, h, w]`` with kernel ``w[o, c, k, k]``."""
    _check_conv("conv2d", x, w, stride, pad)
    if x.shape[1] != w.shape[1]:
        raise ContractViolation(f"conv2d: input channels {x.shape} vs kernel {w.shape}")
    k = w.shape[2]
    oh = conv_output_size(x.shape[2], k, stride, pad)
    ow = conv_output_size(x.shape[3], k, stride, pad)
    if oh < 1 or ow < 1:
        raise ContractViolation(f"conv2d: non-positive output extent for input {x.shape}, "
                                f"kernel {k}, stride {stride}, pad {pad}")
    xv, wv = x.values, w.values
    out, win = _conv_fwd(xv, wv, stride, pad)
    xshape = xv.shape

    def vjp(g):
        dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        return _conv_dx(g, wv, xshape, stride, pad), dw

    return _record("conv2d", (x, w), out, vjp)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0,
                     output_pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; kernel layout ``w[c_in, c_out, k, k]``."""
    _check_conv("conv_transpose2d", x, w, stride, pad)
    if x.shape[1] != w.shape[0]:
        raise ContractViolation(f"conv_transpose2d: input channels {x.shape} vs kernel {w.shape}")
    if not 0 <= output_pad < stride:
        raise ContractViolation("conv_transpose2d: output_pad must satisfy 0 <= output_pad < stride")
    b, _, h, wd = x.shape
    k = w.shape[2]
    oh = conv_transpose_output_size(h, k, stride, pad, output_pad)
    ow = conv_transpose_output_size(wd, k, stride, pad, output_pad)
    if oh < 1 or ow < 1:
        raise ContractViolation(f"conv_transpose2d: non-positive output extent for input "
                                f"{x.shape}, kernel {k}, stride {stride}, pad {pad}")
    xv, wv = x.values, w.values
    out = _conv_dx(xv, wv, (b, w.shape[1], oh, ow), stride, pad)

    def vjp(g):
        dx, win = _conv_fwd(g, wv, stride, pad)
        dw = np.tensordot(xv, win, axes=([0, 2, 3], [0, 2, 3]))
        return dx, dw

    return _record("conv_transpose2d", (x, w), np.ascontiguousarray(out), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ContractViolation(f"global_avg_pool expects [b, c, h, w] with h, w >= 1, got {x.shape}")
    return mean(x, axis=(2, 3))


# -- gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    max_relative_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def gradient_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
                   tolerance: float = 1e-4, floor: float = 1e-8) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar function with central differences."""
    if step <= 0:
        raise ContractViolation("gradient_check step must be positive")
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.watch(point)
    y = fn(x)
    if not isinstance(y, Tensor) or y.shape != ():
        raise ContractViolation("gradient_check: function must return a scalar tensor")
    if y.tape is tape:
        (analytic,) = tape.gradient(y, [x])
    else:
        analytic = np.zeros_like(point)
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(Tensor(point.copy())).values)
        flat[i] = orig - step
        lo = float(fn(Tensor(point.copy())).values)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    max_err = float(err.max()) if err.size else 0.0
    return GradCheckReport(max_err, max_err <= tolerance, analytic, numeric)
