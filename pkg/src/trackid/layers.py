"""Parameterised building blocks: conv/bn/linear wrappers, residual stacks,
the LSTM layer and the 1-D convolution used by the fusion classifier."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Prng, Tensor


class Parameter(Tensor):
    def __init__(self, data, dtype=np.float32):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal module tree: parameters, buffers and train/eval mode.

    Children and parameters are discovered from instance attributes in
    definition order, which fixes the checkpoint naming.
    """

    def __init__(self):
        self.training = True
        self.frozen = False
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def astype(self, dtype):
        """Cast every parameter and buffer in place (used by 64-bit gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        for m in self.modules():
            for k in list(m._buffers):
                m._buffers[k] = m._buffers[k].astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(prng: Prng, shape, fan_in: int) -> np.ndarray:
    return (prng.normal(0.0, np.sqrt(2.0 / fan_in), shape)).astype(np.float32)


def uniform_fan_in(prng: Prng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return prng.uniform(-bound, bound, shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0,
                 prng: Prng | None = None, bias: bool = True):
        super().__init__()
        prng = prng or Prng(0)
        self.in_ch, self.out_ch, self.k, self.stride, self.pad = in_ch, out_ch, k, stride, pad
        self.weight = Parameter(he_normal(prng, (out_ch, in_ch, k, k), in_ch * k * k))
        self.bias = Parameter(np.zeros(out_ch, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Conv1d(Module):
    """Stride-1 1-D convolution; output length ``L + 2*pad - k + 1``."""

    def __init__(self, in_ch: int, out_ch: int, k: int, pad: int = 1, prng: Prng | None = None):
        super().__init__()
        prng = prng or Prng(0)
        self.in_ch, self.out_ch, self.k, self.pad = in_ch, out_ch, k, pad
        self.weight = Parameter(he_normal(prng, (out_ch, in_ch, k), in_ch * k))
        self.bias = Parameter(np.zeros(out_ch, np.float32))

    def out_length(self, length: int) -> int:
        return length + 2 * self.pad - self.k + 1

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias, stride=1, pad=self.pad)


class BatchNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, np.float32))
        self.beta = Parameter(np.zeros(channels, np.float32))
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        # a frozen normalization layer keeps its running statistics fixed
        training = self.training and not self.frozen
        return ad.batchnorm(x, self.gamma, self.beta, self._buffers["running_mean"],
                            self._buffers["running_var"], training)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, prng: Prng | None = None):
        super().__init__()
        prng = prng or Prng(0)
        self.weight = Parameter(uniform_fan_in(prng, (in_dim, out_dim), in_dim))
        self.bias = Parameter(uniform_fan_in(prng.split(1), (out_dim,), in_dim))

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class ResidualStack(Module):
    """Two 3×3 convolutions with bn+relu between them, summed with a shortcut,
    followed by a post-sum bn+relu.

    A 1×1 projection shortcut is created when the channel count or stride
    changes; otherwise the shortcut is the identity.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, prng: Prng | None = None):
        super().__init__()
        prng = prng or Prng(0)
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.conv_a = Conv2d(in_ch, out_ch, 3, stride, 1, prng.split(0))
        self.bn_a = BatchNorm(out_ch)
        self.conv_b = Conv2d(out_ch, out_ch, 3, 1, 1, prng.split(1))
        self.proj = None
        if in_ch != out_ch or stride != 1:
            self.proj = Conv2d(in_ch, out_ch, 1, stride, 0, prng.split(2), bias=False)
        self.bn_out = BatchNorm(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise DimensionError(
                f"residual stack expects {self.in_ch} input channels, got {x.shape[1]}", axis="C")
        f = self.conv_b(ad.relu(self.bn_a(self.conv_a(x))))
        shortcut = self.proj(x) if self.proj is not None else x
        return ad.relu(self.bn_out(ad.eltwise_add(f, shortcut)))


def residual_forward(stack: ResidualStack, x: Tensor) -> Tensor:
    return stack(x)


class LSTM(Module):
    """Single-layer LSTM, four independent gates (i, f, g, o), no peepholes.

    ``w_ih`` is ``[D, 4H]`` and ``w_hh`` is ``[H, 4H]`` with gate blocks laid
    out as i, f, g, o along the second axis.
    """

    def __init__(self, input_size: int, hidden_size: int, prng: Prng | None = None):
        super().__init__()
        prng = prng or Prng(0)
        self.input_size, self.hidden_size = input_size, hidden_size
        H = hidden_size
        bound = 1.0 / np.sqrt(H)
        self.w_ih = Parameter(prng.uniform(-bound, bound, (input_size, 4 * H)).astype(np.float32))
        self.w_hh = Parameter(prng.split(1).uniform(-bound, bound, (H, 4 * H)).astype(np.float32))
        b = np.zeros(4 * H, np.float32)
        b[H:2 * H] = 1.0
        self.bias = Parameter(b)

    def step(self, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        """One time step for a batch ``x_t[B,D]``; returns ``(h_t, c_t)``."""
        H = self.hidden_size
        if x_t.shape[-1] != self.input_size:
            raise DimensionError(
                f"LSTM input size {self.input_size}, got {x_t.shape[-1]}", axis="D")
        x_proj = ad.matmul(x_t, self.w_ih)
        if h_prev.shape[-1] != H or c_prev.shape[-1] != H:
            raise DimensionError(f"LSTM state size must be {H}", axis="H")
        z = ad.add(ad.add(x_proj, ad.matmul(h_prev, self.w_hh)), self.bias)
        i = ad.sigmoid(z[:, 0:H])
        f = ad.sigmoid(z[:, H:2 * H])
        g = ad.tanh(z[:, 2 * H:3 * H])
        o = ad.sigmoid(z[:, 3 * H:4 * H])
        c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        return h, c

    def forward(self, seq: Tensor) -> Tensor:
        """``seq[B,T,D]`` (or ``[T,D]``) -> hidden states of the same leading shape."""
        squeeze = seq.ndim == 2
        if squeeze:
            seq = ad.reshape(seq, (1,) + seq.shape)
        B, T, D = seq.shape
        if T == 0:
            raise DimensionError("LSTM sequence must have T >= 1", axis="T")
        if D != self.input_size:
            raise DimensionError(f"LSTM input size {self.input_size}, got {D}", axis="D")
        h = Tensor(np.zeros((B, self.hidden_size), seq.dtype))
        c = Tensor(np.zeros((B, self.hidden_size), seq.dtype))
        outs = []
        for t in range(T):
            h, c = self.step(seq[:, t, :], h, c)
            outs.append(h)
        out = ad.stack(outs, axis=1)
        return ad.reshape(out, (T, self.hidden_size)) if squeeze else out


def lstm_step(layer: LSTM, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """Unbatched convenience wrapper: vectors ``x_t[D]``, ``h_prev[H]``, ``c_prev[H]``."""
    if x_t.ndim == 1:
        x_t = ad.reshape(x_t, (1, -1))
        h_prev = ad.reshape(h_prev, (1, -1))
        c_prev = ad.reshape(c_prev, (1, -1))
        h, c = layer.step(x_t, h_prev, c_prev)
        return ad.reshape(h, (-1,)), ad.reshape(c, (-1,))
    return layer.step(x_t, h_prev, c_prev)


def lstm_forward(layer: LSTM, seq: Tensor) -> Tensor:
    return layer(seq)
