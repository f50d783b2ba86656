"""Parameter-holding layers and a minimal module tree.

Modules register Parameters and buffers as attributes; ``named_parameters``
walks the tree in attribute insertion order, which makes parameter naming and
checkpoint layout deterministic.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor

__all__ = [
    "Module",
    "ModuleList",
    "Conv2d",
    "ConvTranspose2d",
    "BatchNorm2d",
    "LayerNorm",
    "Linear",
    "kaiming_uniform",
]


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, ModuleList):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def bind_parameter_names(self) -> None:
        """Stamp each Parameter with its dotted path in this tree."""
        for name, p in self.named_parameters():
            p.name = name


class ModuleList(list):
    """Plain list of Modules that participates in tree traversal."""


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        super().__init__()
        self.spec = ops.ConvSpec(in_channels, out_channels, kernel, stride, padding, bias)
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(
            kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


class ConvTranspose2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(
            kaiming_uniform(rng, (in_channels, out_channels, kernel, kernel), fan_in, dtype)
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, *, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.eps = eps
        self.momentum = momentum
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def state(self) -> ops.NormState:
        return ops.NormState(
            gamma=self.gamma,
            beta=self.beta,
            eps=self.eps,
            momentum=self.momentum,
            training=self.training,
            running_mean=self._buffers["running_mean"],
            running_var=self._buffers["running_var"],
        )

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.state())


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5, *, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter(np.ones(width, dtype=dtype))
        self.beta = Parameter(np.zeros(width, dtype=dtype))
        self.eps = eps

    def state(self) -> ops.NormState:
        return ops.NormState(gamma=self.gamma, beta=self.beta, eps=self.eps, training=self.training)

    def forward(self, t: Tensor) -> Tensor:
        return ops.layernorm(t, self.state())


class Linear(Module):
    def __init__(
        self,
        in_width: int,
        out_width: int,
        bias: bool = True,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (in_width, out_width), in_width, dtype))
        self.bias = Parameter(np.zeros(out_width, dtype=dtype)) if bias else None

    def forward(self, t: Tensor) -> Tensor:
        return ops.linear(t, self.weight, self.bias)
