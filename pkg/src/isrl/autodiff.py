"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations on :class:`Tensor` objects are recorded onto the active
:class:`Tape` whenever one of their inputs is tracked. Every backward rule is
itself written with Tensor operations, so a backward pass can be recorded
(``create_graph=True``) and differentiated again. That is what the IRMv1
penalty needs: the gradient of a squared gradient.

Example
-------
>>> x = Tensor(3.0, requires_grad=True)
>>> with Tape() as tape:
...     y = x * x
...     (dx,) = tape.gradient(y, [x])
>>> float(dx.data)
6.0
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import field
from .errors import DimensionError, StructuralError

_active: list["Tape"] = []
_recording = [True]


def active_tape() -> "Tape | None":
    return _active[-1] if _active else None


@contextlib.contextmanager
def no_record():
    """Evaluate Tensor operations without recording them."""
    _recording.append(False)
    try:
        yield
    finally:
        _recording.pop()


@contextlib.contextmanager
def ensure_tape():
    """Yield the active tape, opening a temporary one if there is none."""
    tape = active_tape()
    if tape is not None:
        yield tape
    else:
        with Tape() as tape:
            yield tape


class Tensor:
    """A float64 array that may carry a node on the active tape."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "tape", "index", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.tape = None
        self.index = None
        self.name = name

    # -- basic properties -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = " tracked" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant_like(x, value=0.0) -> Tensor:
    return Tensor(np.full(np.shape(x.data if isinstance(x, Tensor) else x), value))


class Tape:
    """Ordered record of primitive operations.

    Creation order on the tape is a topological order, so the reverse sweep
    simply walks the record backwards. Only one tape may be active at a time.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        if _active:
            raise StructuralError("a tape is already active; nested tapes are not supported")
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Tensor) -> None:
        node.tape = self
        node.index = len(self.nodes)
        self.nodes.append(node)

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False,
                 allow_unreachable: bool = True) -> list[Tensor]:
        """Reverse-mode gradients of scalar ``loss`` with respect to ``wrt``.

        With ``create_graph`` the backward operations are recorded onto this
        tape, so the returned gradients can be differentiated again.
        """
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        for w in wrt:
            if not isinstance(w, Tensor) or not w.requires_grad:
                raise StructuralError("gradient requested for a tensor that is not tracked")
            if w.tape is not None and w.tape is not self:
                raise StructuralError("gradient requested for a tensor recorded on another tape")
        zeros = [Tensor(np.zeros_like(w.data)) for w in wrt]
        if loss.tape is None:
            if not allow_unreachable:
                raise StructuralError("loss does not depend on the requested tensors")
            return zeros
        if loss.tape is not self:
            raise StructuralError("loss was recorded on a different tape")

        targets = {id(w) for w in wrt}
        stop = loss.index
        relevant = np.zeros(stop + 1, dtype=bool)
        for i in range(stop + 1):
            node = self.nodes[i]
            if id(node) in targets:
                relevant[i] = True
                continue
            for p in node.parents:
                if id(p) in targets or (p.tape is self and p.index is not None and relevant[p.index]):
                    relevant[i] = True
                    break
        if not relevant[stop]:
            if not allow_unreachable:
                raise StructuralError("loss does not depend on the requested tensors")
            return zeros

        def wanted(p):
            return id(p) in targets or (p.tape is self and p.index is not None
                                         and p.index <= stop and relevant[p.index])

        grads: dict[int, Tensor] = {id(loss): Tensor(np.ones_like(loss.data))}
        ctx = contextlib.nullcontext() if create_graph else no_record()
        with ctx:
            for i in range(stop, -1, -1):
                node = self.nodes[i]
                g = grads.get(id(node))
                if g is None or not relevant[i] or node.backward_fn is None:
                    continue
                parent_grads = node.backward_fn(g)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or not wanted(p):
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
        out = []
        for w, z in zip(wrt, zeros):
            g = grads.get(id(w))
            out.append(z if g is None else g)
        return out


def gradient(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``loss`` on whichever tape recorded it."""
    tape = loss.tape or active_tape()
    if tape is None:
        return [Tensor(np.zeros_like(w.data)) for w in wrt]
    return tape.gradient(loss, wrt, create_graph=create_graph)


def backward(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """First-order gradients as plain arrays."""
    return [g.data for g in gradient(loss, wrt)]


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _recording[-1] and _active and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _active[-1].record(out)
    return out


# --- broadcasting helpers ----------------------------------------------------

def _reduce_to_shape(arr: np.ndarray, shape) -> np.ndarray:
    if arr.shape == tuple(shape):
        return arr
    lead = arr.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and arr.shape[i + lead] != 1)
    out = arr.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _make(_reduce_to_shape(x.data, shape), (x,),
                 lambda g: (broadcast_to(g, x.shape),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _make(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (sum_to(g, x.shape),))


# --- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),))


def sub(a, b) -> Tensor:
    return add(a, neg(as_tensor(b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = div(g, b)
        return sum_to(ga, a.shape), sum_to(neg(mul(ga, div(a, b))), b.shape)

    return _make(a.data / b.data, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    p = float(exponent)
    if p == 2.0:
        return _make(a.data * a.data, (a,), lambda g: (mul(g, mul(a, 2.0)),))
    return _make(a.data ** p, (a,), lambda g: (mul(g, mul(power(a, p - 1.0), p)),))


def square(a) -> Tensor:
    return power(a, 2.0)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_holder = []

    def bw(g):
        return (mul(g, out_holder[0]),)

    out = _make(np.exp(a.data), (a,), bw)
    out_holder.append(out)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    holder = []
    out = _make(np.tanh(a.data), (a,),
                lambda g: (mul(g, sub(1.0, square(holder[0]))),))
    holder.append(out)
    return out


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (mul(g, scale),))


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


# --- reductions and shape ops ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bw(g):
        return (broadcast_to(reshape(g, kept_shape), a.shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    return _make(a.data[index], (a,), lambda g: (scatter(g, index, a.shape),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def scatter(g, index, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``index`` (adjoint of indexing)."""
    g = as_tensor(g)
    out = np.zeros(shape)
    if _is_basic_index(index):
        out[index] = g.data
    else:
        np.add.at(out, index, g.data)
    return _make(out, (g,), lambda h: (getitem(h, index),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        out = []
        for lo, hi in zip(sizes[:-1], sizes[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def matmul(a, b) -> Tensor:
    """2D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul supports 2D operands only")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


# --- classification ------------------------------------------------------------

def log_softmax(z, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    holder = []

    def bw(g):
        soft = exp(holder[0])
        return (sub(g, mul(soft, sum_(g, axis, keepdims=True))),)

    out = _make(data, (z,), bw)
    holder.append(out)
    return out


def softmax_cross_entropy(logits, onehot) -> Tensor:
    """Mean over the batch of ``-sum_j y_j log softmax(z)_j``."""
    logits = as_tensor(logits)
    onehot = as_tensor(onehot)
    return mean(neg(sum_(mul(onehot, log_softmax(logits, -1)), axis=-1)))


# --- images and fields --------------------------------------------------------------

def _conv_geometry(h, w, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Patch matrix of shape ``(C * k * k, B * Ho * Wo)``.

    Batch and spatial axes stay innermost so the copy runs along contiguous rows.
    """
    b, c = x.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, -1)


def _conv_forward(x, w, stride, pad):
    b = x.shape[0]
    o, c, k, _ = w.shape
    ho, wo = _conv_geometry(x.shape[2], x.shape[3], k, stride, pad)
    out = w.reshape(o, -1) @ _im2col(x, k, stride, pad)
    return out.reshape(o, b, ho, wo).transpose(1, 0, 2, 3)


def _conv_input_grad(g, w, x_shape, stride, pad):
    # transposed convolution: dilate g by the stride, pad, correlate with the flipped kernel
    b, c, h, wd = x_shape
    o, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    if stride > 1:
        gd = np.zeros((b, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    edge = k - 1 - pad
    if edge < 0:
        raise DimensionError("padding larger than kernel - 1 is not supported")
    extra_h = h + 2 * pad - k - (ho - 1) * stride
    extra_w = wd + 2 * pad - k - (wo - 1) * stride
    gd = np.pad(gd, ((0, 0), (0, 0), (edge, edge + extra_h), (edge, edge + extra_w)))
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return _conv_forward(gd, wf, 1, 0)


def _conv_weight_grad(x, g, w_shape, stride, pad):
    k = w_shape[2]
    g2 = g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)
    return (g2 @ _im2col(x, k, stride, pad).T).reshape(w_shape)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x (B, C, H, W)`` with ``w (O, C, k, k)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shapes incompatible: {x.shape} and {w.shape}")

    def bw(g):
        return (conv2d_input_grad(g, w, x.shape, stride, padding),
                conv2d_weight_grad(x, g, w.shape, stride, padding))

    return _make(_conv_forward(x.data, w.data, stride, padding), (x, w), bw)


def conv2d_input_grad(g, w, x_shape, stride, padding) -> Tensor:
    g, w = as_tensor(g), as_tensor(w)

    def bw(h):
        return (conv2d(h, w, stride, padding), conv2d_weight_grad(h, g, w.shape, stride, padding))

    return _make(_conv_input_grad(g.data, w.data, x_shape, stride, padding), (g, w), bw)


def conv2d_weight_grad(x, g, w_shape, stride, padding) -> Tensor:
    x, g = as_tensor(x), as_tensor(g)

    def bw(h):
        return (conv2d_input_grad(g, h, x.shape, stride, padding), conv2d(x, h, stride, padding))

    return _make(_conv_weight_grad(x.data, g.data, w_shape, stride, padding), (x, g), bw)


def upsample2(x) -> Tensor:
    """Nearest-neighbour upsampling by 2 in both spatial axes."""
    x = as_tensor(x)
    return _make(x.data.repeat(2, axis=-2).repeat(2, axis=-1), (x,), lambda g: (pool_sum2(g),))


def pool_sum2(x) -> Tensor:
    """Sum over non-overlapping 2x2 blocks (adjoint of :func:`upsample2`)."""
    x = as_tensor(x)
    *lead, h, w = x.shape
    data = x.data.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))
    return _make(data, (x,), lambda g: (upsample2(g),))


def diff(x, axis: int) -> Tensor:
    """Finite-difference derivative along ``axis`` (see :func:`isrl.field.diff`)."""
    x = as_tensor(x)
    return _make(field.diff(x.data, axis), (x,), lambda g: (diff_adjoint(g, axis),))


def diff_adjoint(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return _make(field.diff_adjoint(x.data, axis), (x,), lambda g: (diff(g, axis),))


def spectral_multiply(x, multipliers: np.ndarray) -> Tensor:
    """Apply a real, frequency-symmetric Fourier multiplier over the last two axes.

    The operator is self-adjoint, so the backward rule is the same multiply.
    """
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if multipliers.shape != (h, w // 2 + 1):
        raise DimensionError(f"multipliers {multipliers.shape} do not fit grid {(h, w)}")
    data = np.fft.irfft2(np.fft.rfft2(x.data) * multipliers, s=(h, w))
    return _make(data, (x,), lambda g: (spectral_multiply(g, multipliers),))


def interpolate(f, pos) -> Tensor:
    """Clamped bilinear sampling of ``f (B, C, H, W)`` at ``pos (B, 2, H, W)``.

    Differentiable in both arguments to first order. The position adjoint of
    out-of-range coordinates is zero (subgradient of the clamp).
    """
    f, pos = as_tensor(f), as_tensor(pos)

    def bw(g):
        if _recording[-1]:
            raise NotImplementedError("second-order differentiation through interpolate is not supported")
        gf = field.interpolate_adjoint_batch(g.data, pos.data, f.shape)
        dpos = field.interpolate_position_grad_batch(f.data, pos.data)
        gp = (g.data[:, :, None] * dpos).sum(axis=1)
        return Tensor(gf), Tensor(gp)

    return _make(field.interpolate_batch(f.data, pos.data), (f, pos), bw)


# --- higher-order helper -----------------------------------------------------------

def grad_of_grad(loss_builder: Callable[[Tensor], Tensor], params: Sequence[Tensor]):
    """Penalty ``(d loss / d w)^2`` at ``w = 1`` and its gradient with respect to ``params``.

    ``loss_builder`` receives the scalar probe ``w`` and must use it on the
    path to the loss. Returns ``(penalty, grads)`` with arrays.
    """
    with Tape() as tape:
        w = Tensor(1.0, requires_grad=True, name="probe")
        loss = loss_builder(w)
        (gw,) = tape.gradient(loss, [w], create_graph=True, allow_unreachable=False)
        penalty = sum_(square(gw))
        grads = tape.gradient(penalty, params)
    return penalty.item(), [g.data for g in grads]
