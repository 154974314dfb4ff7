"""Parameter-holding layers built on :mod:`nlnet.tensor`.

Layers may be created with ``allocate=False``: they then carry only their
hyperparameters, which is enough for shape inference and cost counting on
full-size architectures without allocating weights.
"""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import tensor as F
from .errors import ShapeError
from .tensor import Tensor


def layer_rng(seed: int, name: str) -> np.random.Generator:
    """Per-layer generator so that adding layers never shifts other layers' init."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Module:
    """Minimal module tree: ordered children, named parameters and buffers."""

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield getattr(v, "name", None) or f"{name}.{i}", v

    def own_parameters(self) -> dict[str, Tensor]:
        return {}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n, p in self.own_parameters().items():
            if p is not None:
                yield prefix + n, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for n, b in self.own_buffers().items():
            if b is not None:
                yield prefix + n, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv3d(Module):
    """``t x kh x kw`` convolution over ``[B,T,H,W,C]``; no bias unless asked."""

    def __init__(
        self,
        cin: int,
        cout: int,
        kernel=(1, 1, 1),
        stride=(1, 1, 1),
        padding=None,
        bias: bool = False,
        pad_mode: str = "zero",
        rng: np.random.Generator | None = None,
        allocate: bool = True,
    ):
        super().__init__()
        self.cin, self.cout = int(cin), int(cout)
        self.kernel = F._triple(kernel)
        self.stride = F._triple(stride)
        self.padding = tuple(k // 2 for k in self.kernel) if padding is None else F._triple(padding)
        self.pad_mode = pad_mode
        self.has_bias = bias
        self.weight: Tensor | None = None
        self.bias: Tensor | None = None
        if allocate:
            rng = rng if rng is not None else np.random.default_rng(0)
            fan_in = self.kernel[0] * self.kernel[1] * self.kernel[2] * self.cin
            shape = self.kernel + (self.cin, self.cout)
            self.weight = Tensor(he_normal(rng, shape, fan_in), requires_grad=True)
            if bias:
                self.bias = Tensor(np.zeros(self.cout), requires_grad=True)

    def own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Tensor) -> Tensor:
        y = F.conv3d(x, self.weight, self.stride, self.padding, self.pad_mode)
        return y if self.bias is None else y + self.bias

    def out_shape(self, shape: tuple) -> tuple:
        T, H, W, C = shape
        if C != self.cin:
            raise ShapeError(f"conv expects {self.cin} channels, got {C}")
        dims = []
        for L, k, s, p in zip((T, H, W), self.kernel, self.stride, self.padding):
            if k > L + 2 * p:
                raise ShapeError(f"kernel {self.kernel} larger than padded input {shape}")
            dims.append(F.conv_output_extent(L, k, s, p))
        return (*dims, self.cout)

    def cost(self, shape: tuple) -> tuple[int, int]:
        """(parameters, multiply-adds) for one clip of ``shape = (T,H,W,C)``."""
        kt, kh, kw = self.kernel
        per_out = kt * kh * kw * self.cin
        params = per_out * self.cout + (self.cout if self.has_bias else 0)
        To, Ho, Wo, _ = self.out_shape(shape)
        return params, To * Ho * Wo * per_out * self.cout


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 zero_init: bool = False, allocate: bool = True):
        super().__init__()
        self.channels = int(channels)
        self.momentum, self.eps = momentum, eps
        self.frozen = False
        self.gamma = self.beta = None
        self.running_mean = self.running_var = None
        if allocate:
            self.gamma = Tensor(np.zeros(channels) if zero_init else np.ones(channels), requires_grad=True)
            self.beta = Tensor(np.zeros(channels), requires_grad=True)
            self.running_mean = np.zeros(channels)
            self.running_var = np.ones(channels)

    def own_parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training and not self.frozen, momentum=self.momentum, eps=self.eps,
        )

    def out_shape(self, shape):
        return shape

    def cost(self, shape):
        return 2 * self.channels, 0


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)

    def out_shape(self, shape):
        return shape

    def cost(self, shape):
        return 0, 0


class MaxPool3d(Module):
    def __init__(self, window, stride=None, padding=0):
        super().__init__()
        self.window = F._triple(window)
        self.stride = self.window if stride is None else F._triple(stride)
        self.padding = F._triple(padding)

    def forward(self, x):
        if self.window == (1, 1, 1) and self.stride == (1, 1, 1):
            return x
        return F.max_pool3d(x, self.window, self.stride, self.padding)

    def out_shape(self, shape):
        T, H, W, C = shape
        dims = []
        for L, k, s, p in zip((T, H, W), self.window, self.stride, self.padding):
            if k > L + 2 * p:
                raise ShapeError(f"pool window {self.window} exceeds extent of {shape}")
            dims.append(F.conv_output_extent(L, k, s, p))
        return (*dims, C)

    def cost(self, shape):
        return 0, 0


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator | None = None, allocate: bool = True):
        super().__init__()
        self.din, self.dout = int(din), int(dout)
        self.weight = self.bias = None
        if allocate:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.weight = Tensor(rng.standard_normal((din, dout)) * 0.01, requires_grad=True)
            self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)

    def cost(self, shape):
        return self.din * self.dout + self.dout, self.din * self.dout


class Dropout(Module):
    def __init__(self, p: float = 0.5, seed: int = 0):
        super().__init__()
        self.p = p
        self.rng = np.random.default_rng([int(seed), 0x0D0])

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng([int(seed), 0x0D0])

    def forward(self, x):
        return F.dropout(x, self.p, self.rng, self.training)
