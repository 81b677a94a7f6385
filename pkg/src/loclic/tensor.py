"""Dense rank-4 tensor engine with reverse-mode automatic differentiation.

Everything is float64 and shaped (batch, channel, height, width). Ops are
recorded on an explicitly created :class:`GradTape` while it is active;
``backward(loss, tape)`` replays the records in exact reverse order and
returns a gradient map. No implicit broadcasting except scalar-tensor;
shape mismatches fail loudly with both shapes in the message.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN2 = math.log(2.0)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on invalid tape usage (non-scalar loss, loss not on tape)."""


def _as_shape4(shape) -> tuple[int, int, int, int]:
    t = tuple(int(s) for s in shape)
    if len(t) != 4 or any(s <= 0 for s in t):
        raise ShapeError(f"expected a rank-4 shape of positive dims, got {shape}")
    return t


class Tensor:
    """Rank-4 float64 array, optionally participating in gradient taping."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor must be rank-4 (n,c,h,w), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_scalar(self) -> bool:
        return self.data.size == 1

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; python scalars become constant scalar tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def scalar(value: float) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value)))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(_as_shape4(shape)))


def full(shape, value: float) -> Tensor:
    return Tensor(np.full(_as_shape4(shape), float(value)))


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return scalar(x)
    raise TypeError(f"cannot use {type(x).__name__} as a tensor operand")


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


class GradTape:
    """Ordered record of executed ops plus the gradient accumulator.

    Use as a context manager::

        with GradTape() as tape:
            loss = ...
        grads = backward(loss, tape)
    """

    def __init__(self):
        # entries: (output, inputs, backward_fn); backward_fn(grad_out) yields
        # one gradient array (or None) per input, in input order
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._output_ids: set[int] = set()

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable):
        self.entries.append((output, inputs, backward_fn))
        self._output_ids.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._output_ids

    def __enter__(self) -> "GradTape":
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False


_TAPE_STACK: list[GradTape] = []


def _push_tape(tape: GradTape):
    _TAPE_STACK.append(tape)


def _pop_tape(tape: GradTape):
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise TapeError("tape context exited out of order")
    _TAPE_STACK.pop()


def active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(output, tuple(inputs), backward_fn)
    return output


class GradientMap:
    """Accumulated gradients keyed by tensor identity.

    Tensors that never influence the loss map to exact zeros.
    """

    def __init__(self, grads: dict[int, np.ndarray], keepalive: dict[int, Tensor]):
        self._grads = grads
        self._keepalive = keepalive

    def get(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros(t.shape)
        return g

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self.get(t)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


def backward(loss: Tensor, tape: GradTape) -> GradientMap:
    """Reverse-replay the tape from a scalar loss; returns the gradient map."""
    if not loss.is_scalar():
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    keepalive: dict[int, Tensor] = {id(loss): loss}
    for output, inputs, backward_fn in reversed(tape.entries):
        g_out = grads.get(id(output))
        if g_out is None:
            continue
        in_grads = backward_fn(g_out)
        for t, g in zip(inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = g if acc is None else acc + g
            keepalive[id(t)] = t
    return GradientMap(grads, keepalive)


# --------------------------------------------------------------------------
# elementwise and reduction ops
# --------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    if a.shape == b.shape:
        return
    if a.is_scalar() or b.is_scalar():
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ and neither is scalar")


def _reduce_for(t: Tensor, g: np.ndarray) -> np.ndarray:
    # collapse a full-shape gradient back to a scalar operand
    if t.is_scalar() and g.shape != t.shape:
        return np.sum(g).reshape(1, 1, 1, 1)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_reduce_for(a, g), _reduce_for(b, g)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_reduce_for(a, g), _reduce_for(b, -g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bw(g):
        return _reduce_for(a, g * b.data), _reduce_for(b, g * a.data)

    return _record(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "div")
    out = Tensor(a.data / b.data)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _reduce_for(a, ga), _reduce_for(b, gb)

    return _record(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    return _record(out, (a,), lambda g: (2.0 * a.data * g,))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data).reshape(1, 1, 1, 1))
    return _record(out, (a,), lambda g: (np.broadcast_to(g.reshape(()), a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(np.mean(a.data).reshape(1, 1, 1, 1))
    return _record(out, (a,), lambda g: (np.broadcast_to(g.reshape(()) / n, a.shape).copy(),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    out = Tensor(np.where(a.data > 0, a.data, slope * a.data))
    return _record(out, (a,), lambda g: (np.where(a.data > 0, g, slope * g),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(y)
    sig = 1.0 / (1.0 + np.exp(-x))
    return _record(out, (a,), lambda g: (g * sig,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log2(a: Tensor) -> Tensor:
    out = Tensor(np.log2(a.data))
    return _record(out, (a,), lambda g: (g / (a.data * _LN2),))


def normal_cdf(a: Tensor) -> Tensor:
    """Standard normal cumulative distribution, elementwise."""
    from scipy.special import ndtr

    out = Tensor(ndtr(a.data))
    pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
    return _record(out, (a,), lambda g: (g * pdf,))


def lower_bound(a: Tensor, bound: float) -> Tensor:
    """max(a, bound) whose gradient passes below the bound only when it
    would push the value upward (keeps clamped parameters trainable)."""
    out = Tensor(np.maximum(a.data, bound))

    def bw(g):
        passthrough = (a.data >= bound) | (g < 0)
        return (np.where(passthrough, g, 0.0),)

    return _record(out, (a,), bw)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def ste_round(a: Tensor) -> Tensor:
    """Round-half-away-from-zero forward, identity gradient backward."""
    out = Tensor(round_half_away(a.data))
    return _record(out, (a,), lambda g: (g.copy(),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast (dims must match or be 1). Backward sums back."""
    shape = _as_shape4(shape)
    for have, want in zip(a.shape, shape):
        if have != want and have != 1:
            raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    axes = tuple(i for i in range(4) if a.shape[i] == 1 and shape[i] != 1)

    def bw(g):
        return (np.sum(g, axis=axes, keepdims=True) if axes else g.copy(),)

    return _record(out, (a,), bw)


def channel_slice(a: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= a.shape[1]):
        raise ShapeError(f"channel slice [{lo}:{hi}] out of range for shape {a.shape}")
    out = Tensor(a.data[:, lo:hi].copy())

    def bw(g):
        full = np.zeros(a.shape)
        full[:, lo:hi] = g
        return (full,)

    return _record(out, (a,), bw)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: shapes {ref} and {p.shape} disagree off-channel")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    sizes = [p.shape[1] for p in parts]

    def bw(g):
        grads = []
        at = 0
        for c in sizes:
            grads.append(g[:, at : at + c].copy())
            at += c
        return tuple(grads)

    return _record(out, tuple(parts), bw)


def slice_axis0(a: Tensor, i: int) -> Tensor:
    """Pick row i of the leading axis, keeping rank 4 (used for packed params)."""
    if not (0 <= i < a.shape[0]):
        raise ShapeError(f"axis-0 index {i} out of range for shape {a.shape}")
    out = Tensor(a.data[i : i + 1].copy())

    def bw(g):
        full = np.zeros(a.shape)
        full[i : i + 1] = g
        return (full,)

    return _record(out, (a,), bw)


def crop2d(a: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    if top < 0 or left < 0 or top + h > a.shape[2] or left + w > a.shape[3]:
        raise ShapeError(f"crop ({top},{left},{h},{w}) exceeds shape {a.shape}")
    out = Tensor(a.data[:, :, top : top + h, left : left + w].copy())

    def bw(g):
        full = np.zeros(a.shape)
        full[:, :, top : top + h, left : left + w] = g
        return (full,)

    return _record(out, (a,), bw)


def replicate_pad2d(a: Tensor, bottom: int, right: int) -> Tensor:
    """Replicate the last row/column to grow the bottom/right edges."""
    if bottom < 0 or right < 0:
        raise ShapeError("pad amounts must be non-negative")
    if bottom == 0 and right == 0:
        out = Tensor(a.data.copy())
        return _record(out, (a,), lambda g: (g.copy(),))
    out_data = np.pad(a.data, ((0, 0), (0, 0), (0, bottom), (0, right)), mode="edge")
    out = Tensor(out_data)
    n, c, h, w = a.shape

    def bw(g):
        gx = g[:, :, :h, :w].copy()
        if bottom:
            gx[:, :, h - 1, :] += g[:, :, h:, :w].sum(axis=2)
        if right:
            gx[:, :, :, w - 1] += g[:, :, :h, w:].sum(axis=3)
        if bottom and right:
            gx[:, :, h - 1, w - 1] += g[:, :, h:, w:].sum(axis=(2, 3))
        return (gx,)

    return _record(out, (a,), bw)


# --------------------------------------------------------------------------
# convolution kernels (shared by conv2d, conv2d_transpose and their grads)
# --------------------------------------------------------------------------


def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * k * k, ho * wo)


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    ho = _conv_out_dim(h, k, stride, pad)
    wo = _conv_out_dim(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(w.reshape(co, ci * k * k), cols)
    return out.reshape(n, co, ho, wo)


def _conv_dx(g: np.ndarray, w: np.ndarray, stride: int, pad: int, in_hw: tuple[int, int]) -> np.ndarray:
    # scatter-add of kernel taps; also serves as the transposed-conv forward
    n, co, ho, wo = g.shape
    _, ci, k, _ = w.shape
    h, wd = in_hw
    dcols = np.matmul(w.reshape(co, ci * k * k).T, g.reshape(n, co, ho * wo))
    dcols = dcols.reshape(n, ci, k, k, ho, wo)
    dxp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dcols[:, :, ki, kj]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + wd])
    return dxp


def _conv_dw(x: np.ndarray, g: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, _, _ = x.shape
    _, co, ho, wo = g.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, stride, ho, wo)
    dw = np.matmul(g.reshape(n, co, ho * wo), cols.transpose(0, 2, 1))
    return dw.sum(axis=0).reshape(co, c, k, k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, pad: int) -> Tensor:
    """2D convolution (cross-correlation), zero padding, square odd kernel.

    weight is (c_out, c_in, k, k); bias, when given, is (1, c_out, 1, 1).
    """
    if stride <= 0:
        raise ShapeError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise ShapeError(f"pad must be non-negative, got {pad}")
    co, ci, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square and odd, got weight shape {weight.shape}")
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d: input shape {x.shape} has {x.shape[1]} channels, weight shape {weight.shape} expects {ci}")
    if bias is not None and bias.shape != (1, co, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} must be (1,{co},1,1)")
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise ShapeError(f"conv2d: input shape {x.shape} too small for kernel {k} with pad {pad}")

    y = _conv_fwd(x.data, weight.data, stride, pad)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    in_hw = (x.shape[2], x.shape[3])
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = _conv_dx(g, weight.data, stride, pad, in_hw) if x.requires_grad else None
        gw = _conv_dw(x.data, g, k, stride, pad) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1) if bias.requires_grad else None
        return gx, gw, gb

    return _record(out, inputs, bw)


def conv2d_transpose(x: Tensor, weight: Tensor, stride: int, pad: int, out_pad: int) -> Tensor:
    """Transposed convolution; exact adjoint of conv2d with matched stride/pad.

    weight is (c_in, c_out, k, k) -- the same array orientation a matched
    forward conv would use, so <conv2d(a, W), b> == <a, conv2d_transpose(b, W)>.
    """
    if stride <= 0:
        raise ShapeError(f"stride must be positive, got {stride}")
    if pad < 0 or out_pad < 0:
        raise ShapeError("pad/out_pad must be non-negative")
    if out_pad >= stride:
        raise ShapeError(f"out_pad {out_pad} must be < stride {stride}")
    ci, co, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square and odd, got weight shape {weight.shape}")
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d_transpose: input shape {x.shape} has {x.shape[1]} channels, weight shape {weight.shape} expects {ci}")
    ho = (x.shape[2] - 1) * stride - 2 * pad + k + out_pad
    wo = (x.shape[3] - 1) * stride - 2 * pad + k + out_pad
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d_transpose: output dims ({ho},{wo}) not positive for input {x.shape}")

    out = Tensor(_conv_dx(x.data, weight.data, stride, pad, (ho, wo)))

    def bw(g):
        gx = _conv_fwd(g, weight.data, stride, pad) if x.requires_grad else None
        gw = _conv_dw(g, x.data, k, stride, pad) if weight.requires_grad else None
        return gx, gw

    return _record(out, (x, weight), bw)
