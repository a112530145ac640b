"""Dense tensors with reverse-mode automatic differentiation.

Every value is a :class:`Tensor` wrapping a row-major numpy buffer (32-bit
float unless a gradient check asks for 64-bit).  Operations are plain
functions that build the graph as they compute; :meth:`Tensor.backward`
sweeps it in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LOG_EPS = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference, frozen bases)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Prng:
    """Splittable counter-based generator (Philox-4x64 keyed by a SeedSequence).

    ``split(*keys)`` derives an independent child stream from the parent seed
    and the keys alone, so results never depend on the order streams are
    consumed in.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(_path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *keys: int) -> "Prng":
        return Prng(self.seed, self.path + tuple(int(k) for k in keys))

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self._gen.uniform(low, high, shape)

    def normal(self, loc=0.0, scale=1.0, shape=None):
        return self._gen.normal(loc, scale, shape)

    def integers(self, low, high=None, shape=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, shape)

    def permutation(self, n):
        return self._gen.permutation(n)


class Tensor:
    """A graph node: value, gradient and the closure that produced it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value, dtype=self.data.dtype)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self._grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        if self._grad is None:
            self._grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self._grad += g

    # -- reverse sweep -----------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node._grad is not None:
                node._backward(node._grad)
                # intermediates are not needed after their sweep
                node._grad_release()

    def _grad_release(self):
        if not self.is_leaf:
            self._grad = None

    # -- operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype or np.float32)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def eltwise_add(a: Tensor, b: Tensor) -> Tensor:
    """Residual sum; both inputs receive the output gradient unchanged."""
    if a.shape != b.shape:
        axis = next((str(i) for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y), "rank")
        raise DimensionError(f"eltwise_add shape mismatch {a.shape} vs {b.shape}", axis=axis)
    return add(a, b)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}", axis="inner")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.size

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inv))

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backward, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _fancy(idx) else full.__setitem__(idx, g)
        a._accumulate(full)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), backward, "getitem")


def _fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def backward(g):
        x._accumulate(g * y * (1 - y))

    return _make(y, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1 - y * y))

    return _make(y, (x,), backward, "tanh")


def dropout(x: Tensor, rate: float, training: bool, prng: Prng | None = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate) so inference is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if prng is None:
        raise ValueError("dropout in train mode needs a Prng")
    keep = prng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)

    def backward(g):
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), backward, "dropout")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """``x[N,D] @ weight[D,K] + bias[K]``."""
    if x.ndim != 2:
        raise DimensionError(f"linear expects [N,D] input, got {x.shape}", axis="rank")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"linear input width {x.shape[1]} != weight rows {weight.shape[0]}", axis="D")
    y = x.data @ weight.data
    if bias is not None:
        y = y + bias.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, backward, "linear")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``weight[O,C,kH,kW]`` (im2col)."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got {x.shape}", axis="rank")
    N, C, H, W = x.shape
    O, Cw, kH, kW = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel mismatch: input C={C}, weight C={Cw}", axis="C")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    if H + 2 * pad < kH:
        raise DimensionError(f"conv2d kernel height {kH} exceeds padded input {H + 2 * pad}", axis="H")
    if W + 2 * pad < kW:
        raise DimensionError(f"conv2d kernel width {kW} exceeds padded input {W + 2 * pad}", axis="W")
    Ho = (H + 2 * pad - kH) // stride + 1
    Wo = (W + 2 * pad - kW) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kH, kW), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: N,C,Ho,Wo,kH,kW -> rows (N*Ho*Wo), cols (C*kH*kW)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kH * kW)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    y = np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(N, Ho, Wo, C, kH, kW)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kH):
                for j in range(kW):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, backward, "conv2d")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """1-D cross-correlation of ``x[N,C,L]`` with ``weight[O,C,k]``."""
    if x.ndim != 3:
        raise DimensionError(f"conv1d expects [N,C,L] input, got {x.shape}", axis="rank")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv1d channel mismatch: input C={x.shape[1]}, weight C={weight.shape[1]}", axis="C")
    if x.shape[2] < 1:
        raise DimensionError("conv1d needs L >= 1", axis="L")
    x4 = reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2]))
    w4 = reshape(weight, (weight.shape[0], weight.shape[1], 1, weight.shape[2]))
    # pad only along the length axis: pad the 4-D view manually
    if pad:
        x4 = _pad_last(x4, pad)
    y = conv2d(x4, w4, bias, stride=stride, pad=0)
    return reshape(y, (y.shape[0], y.shape[1], y.shape[3]))


def _pad_last(x: Tensor, pad: int) -> Tensor:
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    n = x.shape[-1]

    def backward(g):
        x._accumulate(g[..., pad:pad + n])

    return _make(np.pad(x.data, widths), (x,), backward, "pad")


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Max over k×k windows; ties route gradient to the first cell in row-major order."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {x.shape}", axis="rank")
    N, C, H, W = x.shape
    if k > H:
        raise DimensionError(f"maxpool2d window {k} exceeds height {H}", axis="H")
    if k > W:
        raise DimensionError(f"maxpool2d window {k} exceeds width {W}", axis="W")
    return _maxpool(x, k, k, stride, stride, "maxpool2d")


def maxpool1d(x: Tensor, k: int, stride: int) -> Tensor:
    if x.ndim != 3:
        raise DimensionError(f"maxpool1d expects [N,C,L] input, got {x.shape}", axis="rank")
    if k > x.shape[2]:
        raise DimensionError(f"maxpool1d window {k} exceeds length {x.shape[2]}", axis="L")
    x4 = reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2]))
    y = _maxpool(x4, 1, k, 1, stride, "maxpool1d")
    return reshape(y, (y.shape[0], y.shape[1], y.shape[3]))


def _maxpool(x: Tensor, kh: int, kw: int, sh: int, sw: int, op: str) -> Tensor:
    N, C, H, W = x.shape
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    flat = win.reshape(N, C, Ho, Wo, kh * kw)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                hit = arg == (i * kw + j)
                if hit.any():
                    dx[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += g * hit
        x._accumulate(dx)

    return _make(np.ascontiguousarray(y), (x,), backward, op)


def global_avgpool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avgpool expects NCHW input, got {x.shape}", axis="rank")
    N, C, H, W = x.shape
    area = H * W

    def backward(g):
        x._accumulate(np.broadcast_to((g / area)[:, :, None, None], x.shape))

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "global_avgpool")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool,
              momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over every axis except 1.

    In training mode the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm params must have shape ({C},)", axis="C")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    if training:
        count = x.size // C
        if count < 2:
            raise DimensionError(
                "batchnorm in train mode needs at least 2 elements per channel", axis="N")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data.reshape(bshape)
            if training:
                m = x.size // C
                s1 = gx.sum(axis=axes, keepdims=True)
                s2 = (gx * xhat).sum(axis=axes, keepdims=True)
                dx = (inv.reshape(bshape) / m) * (m * gx - s1 - xhat * s2)
            else:
                dx = gx * inv.reshape(bshape)
            x._accumulate(dx)

    return _make(y.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm")


# ---------------------------------------------------------------------------
# classification head
# ---------------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis with max subtraction."""
    if x.shape[-1] < 2:
        raise DimensionError("softmax needs at least 2 classes", axis="M")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), backward, "softmax")


def cross_entropy(probs: Tensor, labels, eps: float = LOG_EPS) -> Tensor:
    """Mean over rows of ``-log(p[label] + eps)``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise DimensionError(
            f"cross_entropy expects [N,M] probs matching {labels.size} labels, got {probs.shape}",
            axis="N")
    M = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= M):
        raise ValueError(f"label out of range [0, {M})")
    rows = np.arange(labels.size)
    picked = probs.data[rows, labels]
    n = labels.size
    loss = np.asarray(-np.log(picked + eps).mean(), dtype=probs.dtype)

    def backward(g):
        d = np.zeros_like(probs.data)
        d[rows, labels] = -g / ((picked + eps) * n)
        probs._accumulate(d)

    return _make(loss, (probs,), backward, "cross_entropy")


def check_finite(tensors: Iterable[tuple[str, np.ndarray]]):
    for name, arr in tensors:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in {name}")
