"""Dense float tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float32 by default, float64 for the
gradient-check mode used in tests) and record the operations applied to them
on an implicit tape.  Calling :func:`backward` on a scalar loss walks that
tape once in reverse topological order and accumulates gradients into every
tensor created with ``requires_grad=True``.

The op set is deliberately small: exactly what a convolutional backbone, a
region-proposal network and an inception-style detector head need.  Layout is
channels-first, ``[batch, channel, height, width]`` for 4-D tensors.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes of the operands do not fit the operation."""


class ParameterError(ValueError):
    """A non-shape argument is outside its legal range."""


class ContractError(RuntimeError):
    """An operation was invoked outside its contract."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense n-d array with an optional gradient slot.

    ``data`` is always a C-contiguous float32 or float64 numpy array.  After
    a backward pass, every tensor that was created with ``requires_grad=True``
    holds ``grad``, an array of the same shape.  Interior nodes of the graph
    never retain gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def backward(self):
        backward(self)

    # ---- light operator sugar -------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Build an op output, recording the tape edge only when a parent needs it.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    parent, in order.  Extension point for composite ops defined outside this
    module (e.g. ROI pooling).
    """
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    needs = any(p.requires_grad or p._parents for p in parents)
    out.requires_grad = False
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _from_op(a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _from_op(data, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _from_op(np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    # Clamp away from zero so -log(prob) losses stay finite in float32.
    tiny = np.finfo(a.dtype).tiny
    safe = np.maximum(a.data, tiny)
    return _from_op(np.log(safe), (a,), lambda g: (g / safe,))


def sum_all(a: Tensor) -> Tensor:
    data = a.data.sum(dtype=a.dtype).reshape(1)
    return _from_op(data, (a,), lambda g: (np.broadcast_to(g.reshape(()), a.shape).astype(a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    inv = a.dtype.type(1.0 / n)
    data = (a.data.sum(dtype=a.dtype) * inv).reshape(1)

    def bwd(g):
        return (np.broadcast_to(g.reshape(()) * inv, a.shape).astype(a.dtype),)

    return _from_op(data, (a,), bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    data = a.data.reshape(shape)
    return _from_op(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return _from_op(data, (a,), lambda g: (g.transpose(inverse),))


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along the first axis; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _from_op(data, (a,), bwd)


def gather_elems(a: Tensor, rows, cols) -> Tensor:
    """Select single elements of a 2-D tensor; returns a 1-D tensor."""
    if a.data.ndim != 2:
        raise DimensionError(f"gather_elems needs a 2-D tensor, got {a.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    data = a.data[rows, cols]

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _from_op(data, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _from_op(y, (a,), bwd)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Elementwise smooth-L1 of ``pred - target``: 0.5 d^2 for |d| < 1, else |d| - 0.5."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"smooth_l1 target shape {target.shape} != pred shape {pred.shape}")
    d = pred.data - target
    absd = np.abs(d)
    inner = absd < 1.0
    data = np.where(inner, 0.5 * d * d, absd - 0.5).astype(pred.dtype)

    def bwd(g):
        return (g * np.where(inner, d, np.sign(d)).astype(pred.dtype),)

    return _from_op(data, (pred,), bwd)


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------

def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x[N, D]``, ``weight[D, M]``, ``bias[M]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"fully_connected needs 2-D input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"fully_connected inner dimensions differ: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"fully_connected bias shape {bias.shape} != ({weight.shape[1]},)")
    return add(matmul(x, weight), bias)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation plus bias.

    ``x[N, Cin, H, W]``, ``kernel[Cout, Cin, kh, kw]``, ``bias[Cout]``.
    Output spatial extents follow ``floor((H + 2*padding - kh)/stride) + 1``.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input/kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ParameterError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ParameterError(f"padding must be non-negative, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(
            f"conv2d kernel {kernel.shape} does not fit padded input {(n, cin, hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        xp = np.zeros((n, cin, hp, wp), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data

    # Accumulate one sliced tensordot per kernel offset; cheap for 3x3/5x5.
    kdat = kernel.data
    out = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    patches = []
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            patches.append(patch)
            out += np.tensordot(patch, kdat[:, :, i, j], axes=([1], [1]))
    out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bwd(g):
        gn = g.transpose(0, 2, 3, 1)  # [N, Ho, Wo, Cout]
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kdat)
        idx = 0
        for i in range(kh):
            for j in range(kw):
                patch = patches[idx]
                idx += 1
                # dL/dk[:, :, i, j] = sum_{n,ho,wo} g * patch
                gk[:, :, i, j] = np.tensordot(gn, patch, axes=([0, 1, 2], [0, 2, 3]))
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.tensordot(
                    gn, kdat[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = gn.sum(axis=(0, 1, 2))
        return gx, gk, gb

    return _from_op(out, (x, kernel, bias), bwd)


def maxpool2d(x: Tensor, window: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling with floor shape rule; trailing rows/cols are truncated.

    Optional padding is filled with -inf so it never wins a window.  Backward
    routes each window's gradient to its first (row-major) argmax.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d needs a 4-D input, got {x.shape}")
    if window < 1 or stride < 1:
        raise ParameterError(f"window and stride must be positive, got {window}, {stride}")
    if padding < 0 or padding >= window:
        raise ParameterError(f"padding must be in [0, window), got {padding}")
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < window or wp < window:
        raise DimensionError(f"maxpool2d window {window} has no valid position in input {x.shape}")
    ho = (hp - window) // stride + 1
    wo = (wp - window) // stride + 1

    if padding:
        xp = np.full((n, c, hp, wp), -np.inf, dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data

    # [N, C, Ho, Wo, window*window] view of every pooling window, row-major.
    cols = np.empty((n, c, ho, wo, window * window), dtype=x.dtype)
    k = 0
    for i in range(window):
        for j in range(window):
            cols[..., k] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            k += 1
    arg = cols.argmax(axis=-1)  # first occurrence wins ties
    out = np.take_along_axis(cols, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros((n, c, hp, wp), dtype=x.dtype) if padding else np.zeros_like(x.data)
        wi, wj = np.divmod(arg, window)
        oi = np.arange(ho)[None, None, :, None] * stride
        oj = np.arange(wo)[None, None, None, :] * stride
        rows = (oi + wi).ravel()
        colsix = (oj + wj).ravel()
        ni = np.repeat(np.arange(n), c * ho * wo)
        ci = np.tile(np.repeat(np.arange(c), ho * wo), n)
        np.add.at(gx, (ni, ci, rows, colsix), g.ravel())
        if padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        return (gx,)

    return _from_op(out, (x,), bwd)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate)
    factor = x.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.dtype) * factor
    return _from_op(x.data * mask, (x,), lambda g: (g * mask,))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate 4-D tensors along the channel axis, in argument order."""
    inputs = list(inputs)
    if not inputs:
        raise ParameterError("concat_channels needs at least one input")
    first = inputs[0]
    if first.data.ndim != 4:
        raise DimensionError(f"concat_channels needs 4-D inputs, got {first.shape}")
    n, _, h, w = first.shape
    for i, t in enumerate(inputs[1:], start=1):
        if t.data.ndim != 4 or t.shape[0] != n or t.shape[2] != h or t.shape[3] != w:
            raise DimensionError(
                f"concat_channels input {i} has shape {t.shape}, expected [{n}, *, {h}, {w}]")
    if len(inputs) == 1:
        return first
    data = np.concatenate([t.data for t in inputs], axis=1)
    splits = np.cumsum([t.shape[1] for t in inputs])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return _from_op(data, inputs, bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss.

    Visits every recorded op exactly once in reverse topological order,
    accumulates ``grad`` on all requires_grad tensors reached, then clears
    the tape so the graph can be garbage collected.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    # Iterative topological sort (graphs can be deep for 13-conv backbones).
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
        if node._backward is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
        # Tape entry consumed; release references.
        node._parents = ()
        node._backward = None
