"""Minimal module system over ndcore.

Every module can walk its declared layer graph statically through
``cost(shape, prefix)``, which returns the output shape plus one
``(path, params, macs)`` row per leaf. The profiler is built on that walk.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import ndcore as nd
from .ndcore import NDArray

Shape = tuple[int, ...]
Row = tuple[str, int, int]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape, dtype=np.float32) * np.float32(np.sqrt(2.0 / fan_in))


def Parameter(data, dtype=None) -> NDArray:
    return NDArray(data, requires_grad=True, dtype=dtype or nd.get_default_dtype())


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, NDArray) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal --------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(_join(prefix, name))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, NDArray]]:
        for path, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield _join(path, name), p

    def parameters(self) -> list[NDArray]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield _join(path, name), b

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        dtype = np.dtype(dtype)
        for _, mod in self.named_modules():
            for p in mod._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(mod._buffers.items()):
                mod.register_buffer(name, b.astype(dtype))
        return self

    # -- state --------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        """Trainable parameters then buffers, in declaration order."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = {path: (mod, name) for path_mod, mod in self.named_modules()
                for name in mod._buffers for path in [_join(path_mod, name)]}
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, value in state.items():
            if name in own:
                p = own[name]
                if p.shape != value.shape:
                    raise nd.DimensionError(f"{name}: stored shape {value.shape} != {p.shape}")
                p.data = np.array(value, dtype=p.dtype)
            elif name in bufs:
                mod, bname = bufs[name]
                mod.register_buffer(bname, np.array(value))

    # -- static cost walk ---------------------------------------------------
    def cost(self, shape: Shape, prefix: str = "") -> tuple[Shape, list[Row]]:
        raise NotImplementedError(type(self).__name__)

    def _own_params(self) -> int:
        return int(sum(p.size for p in self._params.values()))


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            self._modules[str(i)] = layer

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def cost(self, shape, prefix=""):
        rows = []
        for i, layer in enumerate(self.layers):
            shape, r = layer.cost(shape, _join(prefix, str(i)))
            rows += r
        return shape, rows


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, rng=None, std: float = 0.02):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(trunc_normal(rng, (d_out, d_in), std))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        return nd.linear(x, self.weight, self.bias)

    def cost(self, shape, prefix=""):
        rows = int(np.prod(shape[:-1]))
        return (*shape[:-1], self.d_out), [(prefix, self._own_params(), rows * self.d_in * self.d_out)]


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 1, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = c_in // groups * kernel * kernel
        self.weight = Parameter(kaiming_normal(rng, (c_out, c_in // groups, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x):
        return nd.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def cost(self, shape, prefix=""):
        n, c, h, w = shape
        if c != self.c_in:
            raise nd.DimensionError(f"{prefix}: expects {self.c_in} channels, got {c}")
        ho = nd.conv_out_size(h, self.kernel, self.stride, self.padding)
        wo = nd.conv_out_size(w, self.kernel, self.stride, self.padding)
        macs = n * self.c_out * (self.c_in // self.groups) * self.kernel ** 2 * ho * wo
        return (n, self.c_out, ho, wo), [(prefix, self._own_params(), macs)]


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int = 7, bias: bool = True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.channels, self.kernel = channels, kernel
        self.padding = kernel // 2
        self.weight = Parameter(kaiming_normal(rng, (channels, 1, kernel, kernel), kernel * kernel))
        self.bias = Parameter(np.zeros(channels)) if bias else None

    def forward(self, x):
        return nd.depthwise_conv2d(x, self.weight, self.bias, self.padding)

    def cost(self, shape, prefix=""):
        n, c, h, w = shape
        if c != self.channels:
            raise nd.DimensionError(f"{prefix}: expects {self.channels} channels, got {c}")
        return shape, [(prefix, self._own_params(), n * c * self.kernel ** 2 * h * w)]


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=self.weight.dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=self.weight.dtype))

    def forward(self, x):
        return nd.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.eps, self.momentum)

    def cost(self, shape, prefix=""):
        # folded into the preceding conv at inference: no MACs
        return shape, [(prefix, self._own_params(), 0)]


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind

    def forward(self, x):
        return nd.activation(x, self.kind)

    def cost(self, shape, prefix=""):
        return shape, []


class ConvBN(Sequential):
    """Bias-free convolution followed by batch normalization."""

    def __init__(self, c_in, c_out, kernel=1, stride=1, padding=0, rng=None):
        super().__init__(Conv2d(c_in, c_out, kernel, stride, padding, bias=False, rng=rng), BatchNorm2d(c_out))
