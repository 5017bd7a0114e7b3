"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

The design is define-by-run: every operation that involves a tensor
requiring gradients records its inputs and a backward closure on the
output tensor. Calling :meth:`Tensor.backward` on a scalar loss walks the
recorded graph once in reverse topological order, accumulates gradients
additively into the leaves, and then releases the graph -- a graph is
single-use, and a second ``backward`` on the same loss raises.

Working precision is float32; gradient checking runs the same ops in
float64. All operations are deterministic functions of their inputs.

Thread model: one graph belongs to one thread. Independent tensors and
graphs may be used concurrently; the grad-enable flag is thread-local.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "pow_scalar",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "clamp",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "slice_axis",
    "matmul",
    "linear",
    "conv2d",
    "batch_norm2d",
    "avgpool2d",
    "block_sum",
    "nearest_upsample",
    "shift2d",
    "bilinear_resize",
    "spatial_mean",
    "channel_mean",
    "softmax",
    "grad_check",
]

LOG_EPS = 1e-8

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording within the block (forward values only)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense float array with optional gradient and graph linkage.

    ``data`` is always a float32 or float64 ndarray. ``grad`` is lazily
    created and has the same shape as ``data``; gradients accumulate
    additively across backward passes until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._spent = False
        self._grad_owned = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self._parents:
            flags.append("node")
        tag = (", " + ",".join(flags)) if flags else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # -- graph machinery -------------------------------------------------------

    def _is_graph_input(self) -> bool:
        return self.requires_grad or self._backward is not None

    def detach(self) -> "Tensor":
        """New leaf sharing this tensor's data, cut from any graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    def backward(self) -> None:
        """Reverse-mode pass from a scalar; releases the graph afterwards."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._spent:
            raise RuntimeError("backward was already called on this graph; re-run the forward pass")
        # iterative topological sort (inputs before outputs)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        self._grad_owned = True
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # release: interior grads and all linkage; leaves keep their grads
        for node in topo:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._spent = True
                if node is not self:
                    node.grad = None
                    node._grad_owned = False

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap non-tensor operands, matching the tensor operand's dtype."""
    if isinstance(a, Tensor):
        if isinstance(b, Tensor):
            return a, b
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return Tensor(a), Tensor(b)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p._is_graph_input() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Copy-on-write: the first contribution is stored by reference (ops may
    # hand the same buffer to several parents), the second allocates.
    if not t._is_graph_input():
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a._is_graph_input():
            _accum(a, g * b.data)
        if b._is_graph_input():
            _accum(b, g * a.data)

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data / b.data

    def backward(g):
        if a._is_graph_input():
            _accum(a, g / b.data)
        if b._is_graph_input():
            _accum(b, -g * a.data / (b.data * b.data))

    return _make(out_data, (a, b), backward)


def pow_scalar(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p for a python scalar p (x > 0 unless p is a non-negative integer)."""
    xd = x.data
    out_data = xd ** p

    def backward(g):
        _accum(x, g * p * xd ** (p - 1))

    return _make(out_data, (x,), backward)


# -- elementwise nonlinearities -------------------------------------------------


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out_data = np.maximum(xd, 0)

    def backward(g):
        _accum(x, g * (xd > 0))

    return _make(out_data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g):
        _accum(x, g * out_data)

    return _make(out_data, (x,), backward)


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """log(x + eps); caller guarantees x + eps > 0."""
    xd = x.data
    out_data = np.log(xd + eps)

    def backward(g):
        _accum(x, g / (xd + eps))

    return _make(out_data, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    out_data = np.clip(xd, lo, hi)

    def backward(g):
        _accum(x, g * ((xd >= lo) & (xd <= hi)))

    return _make(out_data, (x,), backward)


# -- reductions and shape ops ----------------------------------------------------


def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out_data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        _accum(x, np.broadcast_to(gg, x.data.shape))

    return _make(out_data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    out_data = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        _accum(x, np.broadcast_to(gg, x.data.shape) / count)

    return _make(out_data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _make(out_data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        _accum(x, g.transpose(inv))

    return _make(out_data, (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [(_as_tensor(t)) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def backward(g):
        start = 0
        for t, s in zip(ts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + s)
            _accum(t, g[tuple(idx)])
            start += s

    return _make(out_data, ts, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = np.ascontiguousarray(x.data[idx])

    def backward(g):
        buf = np.zeros_like(x.data)
        buf[idx] = g
        _accum(x, buf)

    return _make(out_data, (x,), backward)


# -- linear algebra / neural ops ---------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product on the trailing two axes (numpy semantics)."""
    ad_, bd = a.data, b.data
    out_data = np.matmul(ad_, bd)

    def backward(g):
        _accum(a, np.matmul(g, bd.swapaxes(-1, -2)))
        _accum(b, np.matmul(ad_.swapaxes(-1, -2), g))

    return _make(out_data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the trailing axis: x @ w.T + b, w of shape (D_out, D_in)."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"linear: trailing dim {xd.shape[-1]} != D_in {wd.shape[1]}")
    out_data = xd @ wd.T
    if b is not None:
        out_data = out_data + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        _accum(x, (g @ wd).reshape(xd.shape))
        _accum(w, g2.T @ x2)
        if b is not None:
            _accum(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward)


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, width)


def _im2col(xd: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """(N, Ci, H, W) -> (N, Ci*k*k, Ho*Wo) patch matrix."""
    n, cin = xd.shape[:2]
    if k == 1 and stride == 1 and pad == 0:
        return xd.reshape(n, cin, ho * wo)
    xp = _pad_hw(xd, pad)
    cols = np.empty((n, cin, k, k, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, cin * k * k, ho * wo)


def _conv_raw(xd: np.ndarray, wd: np.ndarray, stride: int, pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Correlation forward; returns (output, patch matrix for reuse)."""
    n, cin, h, wdim = xd.shape
    cout, _, k, _ = wd.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wdim + 2 * pad - k) // stride + 1
    colm = _im2col(xd, k, stride, pad, ho, wo)
    out = np.matmul(wd.reshape(cout, -1), colm).reshape(n, cout, ho, wo)
    return out, colm


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``w`` is (C_out, C_in, k, k)
    with odd k; output spatial size must divide exactly:
    H' = (H + 2*pad - k) / stride + 1.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input/weight, got {xd.shape} and {wd.shape}")
    n, cin, h, wdim = xd.shape
    cout, cin_w, k, k2 = wd.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if cin != cin_w:
        raise ValueError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if pad < 0 or stride < 1:
        raise ValueError("conv2d: pad must be >= 0 and stride >= 1")
    if (h + 2 * pad - k) % stride or (wdim + 2 * pad - k) % stride:
        raise ValueError(
            f"conv2d: non-integral output size for input {h}x{wdim}, k={k}, pad={pad}, stride={stride}"
        )
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wdim + 2 * pad - k) // stride + 1

    out, colm = _conv_raw(xd, wd, stride, pad)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out_data = out[0] if squeeze else out

    def backward(g):
        gb = g[None] if squeeze else g
        gm = gb.reshape(n, cout, ho * wo)
        if b is not None and b._is_graph_input():
            _accum(b, gm.sum(axis=(0, 2)))
        if w._is_graph_input():
            gw = np.matmul(gm, colm.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, gw.reshape(wd.shape))
        if x._is_graph_input():
            if stride == 1 and k - 1 - pad >= 0:
                # input gradient is a correlation with the rotated, transposed kernel
                wrot = np.ascontiguousarray(wd.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
                gx, _ = _conv_raw(np.ascontiguousarray(gb), wrot, 1, k - 1 - pad)
            else:
                gcol = np.matmul(wd.reshape(cout, -1).T, gm).reshape(n, cin, k, k, ho, wo)
                gxp = np.zeros((n, cin, h + 2 * pad, wdim + 2 * pad), dtype=xd.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcol[:, :, i, j]
                gx = gxp[:, :, pad : pad + h, pad : pad + wdim] if pad else gxp
            _accum(x, gx[0] if squeeze else gx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    batch_stats: tuple[np.ndarray, np.ndarray] | None = None,
    running_stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Per-channel batch normalization of an (N, C, H, W) tensor.

    With ``running_stats`` the given (mean, var) act as constants (the
    inference path). Otherwise normalization uses the batch statistics and
    the backward pass differentiates through them; ``batch_stats`` may
    supply precomputed biased (mean, var) to avoid recomputation.
    """
    xd = x.data
    n, c, h, w = xd.shape
    if running_stats is not None:
        mean, var = running_stats
        through_stats = False
    elif batch_stats is not None:
        mean, var = batch_stats
        through_stats = True
    else:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        through_stats = True
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(1, c, 1, 1)
    xhat = (xd - mean.astype(xd.dtype).reshape(1, c, 1, 1)) * inv
    out_data = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        if gamma._is_graph_input():
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta._is_graph_input():
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x._is_graph_input():
            dxhat = g * gamma.data.reshape(1, c, 1, 1)
            if through_stats:
                m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                _accum(x, inv * (dxhat - m1 - xhat * m2))
            else:
                _accum(x, inv * dxhat)

    return _make(out_data, (x, gamma, beta), backward)


def avgpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping mean pooling over the trailing two axes."""
    xd = x.data
    h, w = xd.shape[-2:]
    if h % window or w % window:
        raise ValueError(f"avgpool2d: window {window} does not divide {h}x{w}")
    lead = xd.shape[:-2]
    r = xd.reshape(*lead, h // window, window, w // window, window)
    out_data = r.mean(axis=(-3, -1))

    def backward(g):
        gg = g[..., :, None, :, None] / (window * window)
        gg = np.broadcast_to(gg, (*lead, h // window, window, w // window, window))
        _accum(x, gg.reshape(xd.shape))

    return _make(out_data, (x,), backward)


def block_sum(x: Tensor, window: int) -> Tensor:
    """Non-overlapping sum pooling over the trailing two axes."""
    xd = x.data
    h, w = xd.shape[-2:]
    if h % window or w % window:
        raise ValueError(f"block_sum: window {window} does not divide {h}x{w}")
    lead = xd.shape[:-2]
    r = xd.reshape(*lead, h // window, window, w // window, window)
    out_data = r.sum(axis=(-3, -1))

    def backward(g):
        gg = np.broadcast_to(g[..., :, None, :, None], (*lead, h // window, window, w // window, window))
        _accum(x, gg.reshape(xd.shape))

    return _make(out_data, (x,), backward)


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Repeat each entry of the trailing two axes ``factor`` times."""
    xd = x.data
    lead = xd.shape[:-2]
    h, w = xd.shape[-2:]
    out_data = np.broadcast_to(
        xd[..., :, None, :, None], (*lead, h, factor, w, factor)
    ).reshape(*lead, h * factor, w * factor)
    out_data = np.ascontiguousarray(out_data)

    def backward(g):
        gr = g.reshape(*lead, h, factor, w, factor)
        _accum(x, gr.sum(axis=(-3, -1)))

    return _make(out_data, (x,), backward)


def shift2d(x: Tensor, dy: int, dx: int) -> Tensor:
    """out[..., r, c] = x[..., r+dy, c+dx], zero where out of bounds."""
    xd = x.data
    h, w = xd.shape[-2:]
    out_data = np.zeros_like(xd)
    ys_dst = slice(max(0, -dy), min(h, h - dy))
    xs_dst = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    out_data[..., ys_dst, xs_dst] = xd[..., ys_src, xs_src]

    def backward(g):
        gx = np.zeros_like(xd)
        gx[..., ys_src, xs_src] = g[..., ys_dst, xs_dst]
        _accum(x, gx)

    return _make(out_data, (x,), backward)


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned 1-D linear interpolation matrix (n_out, n_in), float64."""
    m = np.zeros((n_out, n_in))
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        s = i * scale
        lo = min(int(np.floor(s)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        f = s - lo
        m[i, lo] += 1.0 - f
        m[i, hi] += f
    return m


def _apply_sep(x3: np.ndarray, rm: np.ndarray, cm: np.ndarray) -> np.ndarray:
    """rm @ x3 @ cm.T over a stack (n, h, w) via two flat GEMMs."""
    n, h, w = x3.shape
    t = (x3.reshape(n * h, w) @ cm.T).reshape(n, h, cm.shape[0])
    t = np.ascontiguousarray(t.transpose(0, 2, 1))
    t = (t.reshape(n * cm.shape[0], h) @ rm.T).reshape(n, cm.shape[0], rm.shape[0])
    return np.ascontiguousarray(t.transpose(0, 2, 1))


def bilinear_resize(x: Tensor, h2: int, w2: int) -> Tensor:
    """Corner-aligned bilinear resampling of the trailing two axes."""
    if h2 < 1 or w2 < 1:
        raise ValueError(f"bilinear_resize: target size {h2}x{w2} must be >= 1")
    xd = x.data
    h, w = xd.shape[-2:]
    lead = xd.shape[:-2]
    rm = _interp_matrix(h, h2).astype(xd.dtype)
    cm = _interp_matrix(w, w2).astype(xd.dtype)
    out_data = _apply_sep(np.ascontiguousarray(xd.reshape(-1, h, w)), rm, cm).reshape(*lead, h2, w2)

    def backward(g):
        gx = _apply_sep(np.ascontiguousarray(g.reshape(-1, h2, w2)), rm.T, cm.T)
        _accum(x, gx.reshape(xd.shape))

    return _make(out_data, (x,), backward)


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over the trailing two (spatial) axes: (..., C, H, W) -> (..., C)."""
    return tmean(x, axis=(-2, -1))


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis: (..., C, H, W) -> (..., H, W)."""
    return tmean(x, axis=-3)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax along ``axis``.

    ``mask`` (same/broadcastable shape, bool) marks valid entries; invalid
    entries come out exactly 0 and valid ones renormalize over the rest.
    Every position must have at least one valid entry along ``axis``.
    """
    xd = x.data
    if mask is None:
        m = xd.max(axis=axis, keepdims=True)
        e = np.exp(xd - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        m = np.where(mask, xd, -np.inf).max(axis=axis, keepdims=True)
        e = np.exp(np.where(mask, xd, m) - m) * mask
    s = e.sum(axis=axis, keepdims=True)
    out_data = e / s

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, out_data * (g - dot))

    return _make(out_data, (x,), backward)


# -- verification -----------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward grads and central differences.

    ``f`` must be a pure scalar-valued function of ``x`` (other captured
    tensors are held fixed). Relative error per element is
    |fd - bw| / max(1, |fd|, |bw|). Use float64 tensors and eps in
    [1e-6, 1e-4] for meaningful results.
    """
    x.zero_grad()
    out = f(x)
    if out.size != 1:
        raise ValueError("grad_check: f must be scalar-valued")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            fd[i] = (fp - fm) / (2 * eps)
    fd = fd.reshape(x.data.shape)
    denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(analytic)))
    return float(np.max(np.abs(fd - analytic) / denom))
