"""Small dense-tensor engine with reverse-mode differentiation.

Only the operations the anchor network needs are provided. Data is stored as
float32; reductions accumulate in float64. There is no implicit broadcasting:
binary ops require identical shapes (or a Python scalar), and shape alignment
goes through :func:`expand`, :func:`reshape` and :func:`transpose`.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

DTYPE = np.float32

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_kink_log: Optional[List[np.ndarray]] = None
_kink_replay: Optional[Iterator[np.ndarray]] = None


@contextmanager
def record_kinks() -> Iterator[List[np.ndarray]]:
    """Collect, in evaluation order, the activation masks of ReLUs evaluated inside the block."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


@contextmanager
def frozen_kinks(masks: Sequence[np.ndarray]) -> Iterator[None]:
    """Make ReLUs inside the block reuse previously recorded masks, in order.

    With the activation pattern held fixed the network is smooth in its
    parameters, so finite differences with larger steps stay meaningful.
    """
    global _kink_replay
    prev, _kink_replay = _kink_replay, iter(masks)
    try:
        yield
    finally:
        _kink_replay = prev


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """Raised when backward is called twice on the same graph."""


class Tensor:
    """An n-dimensional float32 array that records how it was produced."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=DTYPE)
        if not np.isfinite(out.data).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._op = op
        out._consumed = False
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- array-ish accessors ------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __truediv__(self, other: Scalar):
        return mul_scalar(self, 1.0 / other)

    def __matmul__(self, other: "Tensor"):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- graph --------------------------------------------------------------------


class ComputeGraph:
    """Topologically ordered op records reachable from one output tensor."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(output: Tensor) -> list:
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def leaves(self) -> list:
        return [n for n in self.nodes if n._backward is None and n.requires_grad]


def backward(output: Tensor, graph: Optional[ComputeGraph] = None) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

    The graph is released afterwards; a second call on the same output raises.
    """
    if output._consumed:
        raise GraphConsumedError("graph already consumed; rebuild it with a new forward pass")
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ValueError("output does not depend on any tensor that requires grad")
    graph = graph or ComputeGraph(output)

    grads = {id(output): np.ones(output.shape, dtype=DTYPE)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and node.requires_grad:
                node.grad = g.astype(DTYPE) if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._parents = ()
        node._consumed = True


# -- elementwise --------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def mul_scalar(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)
    return Tensor._from_op(a.data * DTYPE(s), (a,), lambda g: (g * DTYPE(s),), "mul_scalar")


def add_scalar(a: Tensor, s: Scalar) -> Tensor:
    return Tensor._from_op(a.data + DTYPE(s), (a,), lambda g: (g,), "add_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0 if _kink_replay is None else next(_kink_replay)
    if _kink_log is not None:
        _kink_log.append(mask)
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- shape --------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(tuple(shape))
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly repeat size-1 axes of ``a`` to reach ``shape`` (same rank)."""
    shape = tuple(shape)
    if len(shape) != a.ndim:
        raise ValueError(f"expand: rank mismatch {a.shape} -> {shape}")
    axes = []
    for i, (s, t) in enumerate(zip(a.shape, shape)):
        if s == t:
            continue
        if s != 1:
            raise ValueError(f"expand: axis {i} has size {s}, cannot expand to {t}")
        axes.append(i)
    axes = tuple(axes)
    out = np.broadcast_to(a.data, shape)
    return Tensor._from_op(out, (a,), lambda g: (_sum_keepdims(g, axes),), "expand")


def _sum_keepdims(g: np.ndarray, axes: Tuple[int, ...]) -> np.ndarray:
    """float64-accumulated sum over ``axes`` keeping dims; short axes are summed slice by slice."""
    acc = g
    for axis in sorted(axes, reverse=True):
        n = acc.shape[axis]
        if n <= 16:
            idx = [slice(None)] * acc.ndim
            idx[axis] = slice(0, 1)
            total = acc[tuple(idx)].astype(np.float64)
            for i in range(1, n):
                idx[axis] = slice(i, i + 1)
                total += acc[tuple(idx)]
            acc = total
        else:
            acc = acc.sum(axis=axis, keepdims=True, dtype=np.float64)
    return acc.astype(DTYPE)


def getitem(a: Tensor, key) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis) only."""
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not (k is Ellipsis or k is None or isinstance(k, (int, slice))):
            raise TypeError("getitem supports basic slicing only; use take() for index arrays")
    src_shape = a.shape

    def _backward(g):
        full = np.zeros(src_shape, dtype=DTYPE)
        full[key] = g
        return (full,)

    return Tensor._from_op(a.data[key], (a,), _backward, "getitem")


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis``; the backward pass scatter-adds."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    n = a.shape[axis]
    is_perm = indices.ndim == 1 and indices.size == n and np.array_equal(np.sort(indices), np.arange(n))
    src_shape = a.shape

    def _backward(g):
        if is_perm:
            return (np.take(g, np.argsort(indices), axis=axis),)
        full = np.zeros(src_shape, dtype=DTYPE)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._from_op(np.take(a.data, indices, axis=axis), (a,), _backward, "take")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# -- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    out = a.data.sum(axis=axes, dtype=np.float64)
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def _backward(g):
        return (np.broadcast_to(g.reshape(kept), src).astype(DTYPE),)

    return Tensor._from_op(out, (a,), _backward, "reduce_sum")


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul_scalar(reduce_sum(a, axes), 1.0 / count)


# -- nonlinear ----------------------------------------------------------------


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {a.shape}")
    x = a.data.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y64 = e / e.sum(axis=axis, keepdims=True)
    y = y64.astype(DTYPE)

    def _backward(g):
        g64 = g.astype(np.float64)
        inner = (g64 * y64).sum(axis=axis, keepdims=True)
        return ((y64 * (g64 - inner)).astype(DTYPE),)

    return Tensor._from_op(y, (a,), _backward, "softmax")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# -- convolution --------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _check_conv_args(x_shape, w_shape, stride, padding, dilation):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x_shape} and {w_shape}")
    n, c, h, w = x_shape
    f, wc, kh, kw = w_shape
    if c != wc:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {wc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1 and padding >= 0")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: non-positive output size {ho}x{wo}")
    return ho, wo


def _windows(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    """(C, Hp, Wp, N) padded input -> strided view (C, kh, kw, Ho, Wo, N)."""
    sc, sh, sw, sn = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (xp.shape[0], kh, kw, ho, wo, xp.shape[3]),
        (sc, sh * dilation, sw * dilation, sh * stride, sw * stride, sn), writeable=False)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-d cross-correlation on NCHW input with an (F, C, kh, kw) kernel.

    Internally the input is laid out as (C, H, W, N) so that im2col and its
    adjoint move contiguous runs of the batch axis, then a single GEMM runs.
    """
    ho, wo = _check_conv_args(x.shape, weight.shape, stride, padding, dilation)
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {f} filters")

    p = padding
    xp = np.zeros((c, h + 2 * p, w + 2 * p, n), dtype=DTYPE)
    xp[:, p:p + h, p:p + w, :] = x.data.transpose(1, 2, 3, 0)
    cols = _windows(xp, kh, kw, ho, wo, stride, dilation).reshape(c * kh * kw, ho * wo * n)
    w2 = weight.data.reshape(f, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(f, ho, wo, n).transpose(3, 0, 1, 2)

    need_x = x.requires_grad

    def _backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 2, 3, 0)).reshape(f, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g2.sum(axis=1, dtype=np.float64).astype(DTYPE) if bias is not None else None
        gx = None
        if need_x:
            dcols = (w2.T @ g2).reshape(c, kh, kw, ho, wo, n)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                r0 = i * dilation
                for j in range(kw):
                    c0 = j * dilation
                    gxp[:, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride, :] += dcols[:, i, j]
            gx = gxp[:, p:p + h, p:p + w, :].transpose(3, 0, 1, 2)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, _backward, "conv2d")


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None,
                     stride: int = 1, padding: int = 0, dilation: int = 1) -> np.ndarray:
    """Direct nested-loop convolution in float64. Slow; used as a correctness witness."""
    ho, wo = _check_conv_args(x.shape, weight.shape, stride, padding, dilation)
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    out = np.zeros((n, f, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ch in range(c):
                        for p in range(kh):
                            r = i * stride - padding + p * dilation
                            if r < 0 or r >= h:
                                continue
                            for q in range(kw):
                                s = j * stride - padding + q * dilation
                                if 0 <= s < w:
                                    acc += float(x[b, ch, r, s]) * float(weight[o, ch, p, q])
                    out[b, o, i, j] = acc
    return out


# -- normalization ------------------------------------------------------------


def channel_affine_norm(x: Tensor, gain: Tensor, bias: Tensor, running_mean: np.ndarray,
                        running_var: np.ndarray, training: bool, momentum: float = 0.1,
                        eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over batch and spatial axes, then affine.

    In training mode with batch size > 1 the batch statistics are used and the
    running buffers are updated in place. Batch size 1 and inference mode use
    the running buffers.
    """
    if x.ndim < 2:
        raise ValueError(f"channel_affine_norm expects (N, C, ...), got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ValueError(f"channel_affine_norm: gain/bias must have shape ({c},)")
    xd = x.data
    shape = xd.shape
    moved = (shape[1], shape[0]) + shape[2:]
    # channel-major (C, M) layout keeps every reduction contiguous
    xc = np.ascontiguousarray(np.swapaxes(xd, 0, 1)).reshape(c, -1)
    count = xc.shape[1]
    use_batch = training and shape[0] > 1

    if use_batch:
        mean = xc.mean(axis=1, dtype=np.float64)
        centered = xc - mean.astype(DTYPE)[:, None]
        var = np.einsum("ij,ij->i", centered, centered, dtype=np.float64) / count
        running_mean[...] = (1.0 - momentum) * running_mean + momentum * mean
        running_var[...] = (1.0 - momentum) * running_var + momentum * var * count / max(count - 1, 1)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        centered = xc - mean.astype(DTYPE)[:, None]

    inv_std = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = centered * inv_std[:, None]
    gd = gain.data
    out = xhat * gd[:, None] + bias.data[:, None]
    out = np.swapaxes(out.reshape(moved), 0, 1)

    def _backward(g):
        gc = np.ascontiguousarray(np.swapaxes(g, 0, 1)).reshape(c, -1)
        g_bias = gc.sum(axis=1, dtype=np.float64)
        g_gain = np.einsum("ij,ij->i", gc, xhat, dtype=np.float64)
        scale = gd * inv_std
        if use_batch:
            gx = (gc - (g_bias / count).astype(DTYPE)[:, None]
                  - xhat * (g_gain / count).astype(DTYPE)[:, None]) * scale[:, None]
        else:
            gx = gc * scale[:, None]
        gx = np.swapaxes(gx.reshape(moved), 0, 1)
        return (gx, g_gain.astype(DTYPE), g_bias.astype(DTYPE))

    return Tensor._from_op(out, (x, gain, bias), _backward, "channel_affine_norm")


def elementwise(a: Tensor, value: np.ndarray, derivative: np.ndarray, op: str) -> Tensor:
    """Wrap a custom elementwise function given its value and pointwise derivative."""
    if value.shape != a.shape or derivative.shape != a.shape:
        raise ValueError(f"{op}: value/derivative must match input shape {a.shape}")
    d = derivative.astype(DTYPE)
    return Tensor._from_op(value, (a,), lambda g: (g * d,), op)

