"""
Parameter containers: a minimal Module base class plus the convolution,
batch-norm and linear layers everything else is assembled from.
"""

import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigurationError
from .tensor import Tensor, parameter

logger = logging.getLogger(__name__)


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Module:
    """Base class with recursive parameter/buffer discovery.

    Parameters are Tensor attributes with requires_grad=True; buffers are the
    numpy attributes listed in `buffer_names`. Submodules may be attributes or
    live inside list attributes. Names follow attribute insertion order, so
    they are stable across runs.
    """

    buffer_names: Tuple[str, ...] = ()

    def __init__(self) -> None:
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        owner: Module = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            owner = owner[int(part)] if isinstance(owner, list) else getattr(owner, part)
        setattr(owner, parts[-1], np.asarray(value, dtype=np.float32))

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by dotted name."""
        state = {f"param/{n}": p.data.copy() for n, p in self.named_parameters()}
        state.update({f"buffer/{n}": b.copy() for n, b in self.named_buffers()})
        return state

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2dLayer(Module):
    """Square-kernel convolution with Glorot-uniform weights."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = False,
        name: str = "conv",
    ):
        super().__init__()
        if min(in_channels, out_channels, kernel, stride) < 1 or padding < 0:
            raise ConfigurationError(
                f"{name}: invalid conv geometry in={in_channels} out={out_channels} k={kernel} s={stride} p={padding}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.name = name
        self.weight = parameter(
            glorot_uniform(
                rng,
                (out_channels, in_channels, kernel, kernel),
                in_channels * kernel * kernel,
                out_channels * kernel * kernel,
            )
        )
        self.bias = parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, name=self.name)


class BatchNormLayer(Module):
    """Per-channel batch norm over `channel_axis` (1 for maps, -1 for token sequences)."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, channel_axis: int = 1, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.channel_axis = channel_axis
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def forward(self, x: Tensor) -> Tensor:
        out, new_mean, new_var = F.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
            channel_axis=self.channel_axis,
        )
        if new_mean is not None:
            self.running_mean = new_mean
            self.running_var = new_var
        return out


class LinearLayer(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, name: str = "linear"):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name
        self.weight = parameter(glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias, name=self.name)


_ACTIVATIONS = {"hardswish": F.hardswish, "relu": F.relu}


class ConvBN(Module):
    """Bias-free conv → batch norm → optional activation."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        activation: Optional[str] = None,
        name: str = "conv",
    ):
        super().__init__()
        if activation is not None and activation not in _ACTIVATIONS:
            raise ConfigurationError(f"{name}: unknown activation '{activation}'")
        self.conv = Conv2dLayer(in_channels, out_channels, kernel, rng, stride, padding, bias=False, name=name)
        self.norm = BatchNormLayer(out_channels)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.conv(x))
        if self.activation is not None:
            y = _ACTIVATIONS[self.activation](y)
        return y
