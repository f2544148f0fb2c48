"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op checks whether any operand requires a gradient; if so
it appends a node to the active :class:`Tape`.  :func:`backward` replays the
tape in reverse and writes gradients into the leaf tensors.

Feature maps are channels-last: a single map is ``H x W x C`` and a batch is
``N x H x W x C``.  Most ops accept either form.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    """An n-dimensional float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; all of these route through the taped functions below.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Parameter:
    """A named, optionally trainable tensor owned by a model bundle."""

    name: str
    tensor: Tensor
    trainable: bool = True

    def __post_init__(self) -> None:
        self.tensor.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.enabled = True

    def record(self, out: Tensor, inputs: Sequence, fn) -> None:
        self.nodes.append(_Node(out, tuple(inputs), fn))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextmanager
def no_grad():
    """Run ops without recording them, e.g. for inference."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts) -> bool:
    return _TAPE.enabled and any(isinstance(t, Tensor) and t.requires_grad for t in ts)


def _make(data: np.ndarray, inputs: Sequence[Tensor], fn) -> Tensor:
    if _needs_grad(*inputs):
        out = Tensor(data, requires_grad=True)
        _TAPE.record(out, inputs, fn)
        return out
    return Tensor(data)


def backward(loss: Tensor, params: Iterable[Parameter | Tensor] | None = None) -> None:
    """Propagate d(loss)/d(leaf) back through the tape.

    Gradients are written (not accumulated) into every reachable leaf that
    requires a gradient.  Tensors listed in ``params`` that the loss does not
    reach get a zero gradient.  The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    nodes = _TAPE.nodes
    produced = {id(n.out) for n in nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        t.grad = grads[key].reshape(t.shape)
    if params is not None:
        for p in params:
            t = p.tensor if isinstance(p, Parameter) else p
            if id(t) not in leaves and (not isinstance(p, Parameter) or p.trainable):
                t.grad = np.zeros_like(t.data)
    _TAPE.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    """Flatten a feature map (or a batch of maps) into vectors."""
    if x.ndim == 4:
        return reshape(x, (x.shape[0], -1))
    return reshape(x, (-1,))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    src = x.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(np.sum(x.data, axis=axis), (x,), fn)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), fn)


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log.  With ``floor``, inputs are clamped from below first and
    the clamped entries receive zero gradient."""
    xd = x.data
    if floor is None:
        if np.any(xd <= 0):
            raise ValueError("log of a non-positive value")
        return _make(np.log(xd), (x,), lambda g: (g / xd,))
    keep = xd >= floor
    xc = np.where(keep, xd, floor)
    return _make(np.log(xc), (x,), lambda g: (np.where(keep, g / xc, 0.0),))


def activation(x: Tensor, kind: str, axis: int = -1) -> Tensor:
    """Dispatch ``tanh | relu | softmax | log`` by name."""
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    if kind == "softmax":
        return softmax(x, axis=axis)
    if kind == "log":
        return log(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def fn(g):
        if ad.ndim == 1:
            return (g @ bd.T, np.outer(ad, g))
        return (g @ bd.T, ad.T @ g)

    return _make(ad @ bd, (a, b), fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for a vector ``n`` or a batch ``N x n``."""
    if x.shape[-1] != weight.shape[0] or weight.shape[1] != bias.shape[-1]:
        raise ValueError(
            f"dense extent mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return add(matmul(x, weight), bias)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected an H x W x C map or N x H x W x C batch, got {x.shape}")
    return x, False


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """2-D cross-correlation, channels-last, kernel ``kh x kw x C_in x C_out``.

    Implemented directly: windows are gathered (im2col) and contracted with
    the kernel in one matrix product.
    """
    x, squeeze = _as_batch(as_tensor(x))
    k = as_tensor(kernel)
    if k.ndim != 4 or k.shape[2] != x.shape[3]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {k.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    kh, kw, cin, cout = k.shape
    n, h, w, _ = x.shape
    if padding == "same":
        ph, pw = kh - 1, kw - 1
        pads = ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0))
    elif padding == "valid":
        pads = None
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xd = x.data
    if pads is not None:
        xd = np.pad(xd, pads)
    hp, wp = xd.shape[1], xd.shape[2]
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d kernel {k.shape} larger than padded input {xd.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    kd = k.data

    if kh == 1 and kw == 1:
        xs = xd[:, ::stride, ::stride, :][:, :ho, :wo, :]
        cols = xs.reshape(-1, cin)
        kmat = kd.reshape(cin, cout)
    else:
        # Column layout (kh, kw, cin) matches the kernel's memory order.
        cols6 = np.empty((n, ho, wo, kh, kw, cin))
        for i in range(kh):
            for j in range(kw):
                cols6[:, :, :, i, j, :] = xd[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :]
        cols = cols6.reshape(-1, kh * kw * cin)
        kmat = kd.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)

    def fn(g):
        g2 = g.reshape(-1, cout)
        gk = None
        gx = None
        if k.requires_grad:
            gk = cols.T @ g2
            gk = gk.reshape(kh, kw, cin, cout)
        if x.requires_grad:
            gcols = g2 @ kmat.T
            gpad = np.zeros((n, hp, wp, cin))
            if kh == 1 and kw == 1:
                gpad[:, : ho * stride : stride, : wo * stride : stride, :] = gcols.reshape(n, ho, wo, cin)
            else:
                gc = gcols.reshape(n, ho, wo, kh, kw, cin)
                for i in range(kh):
                    for j in range(kw):
                        gpad[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += gc[:, :, :, i, j, :]
            if pads is not None:
                gpad = gpad[:, pads[1][0] : pads[1][0] + h, pads[2][0] : pads[2][0] + w, :]
            gx = gpad
        return (gx, gk)

    res = _make(out, (x, k), fn)
    if squeeze:
        res = reshape(res, res.shape[1:])
    return res


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling; extents must divide."""
    x, squeeze = _as_batch(as_tensor(x))
    n, h, w, c = x.shape
    if h % size or w % size:
        raise ValueError(f"max_pool2d: spatial extents {h}x{w} not divisible by {size}")
    offsets = [(i, j) for i in range(size) for j in range(size)]
    # Window elements stacked in row-major order; argmax keeps the first maximum.
    stack = np.stack([x.data[:, i::size, j::size, :] for i, j in offsets])
    idx = stack.argmax(axis=0)
    out = np.take_along_axis(stack, idx[None], axis=0)[0]

    def fn(g):
        gx = np.zeros((n, h, w, c))
        for k, (i, j) in enumerate(offsets):
            gx[:, i::size, j::size, :] = np.where(idx == k, g, 0.0)
        return (gx,)

    res = _make(out, (x,), fn)
    if squeeze:
        res = reshape(res, res.shape[1:])
    return res


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``H x W x C -> 1 x 1 x C`` (batched alike)."""
    x, squeeze = _as_batch(as_tensor(x))
    n, h, w, c = x.shape
    if h < 1 or w < 1:
        raise ValueError(f"global_avg_pool needs H, W >= 1, got {x.shape}")
    out = x.data.mean(axis=(1, 2), keepdims=True)

    def fn(g):
        return (np.broadcast_to(g / (h * w), (n, h, w, c)).copy(),)

    res = _make(out, (x,), fn)
    if squeeze:
        res = reshape(res, res.shape[1:])
    return res
