"""Hierarchical feature cascade: upsample, concatenate, gate.

The deepest map is upsampled and concatenated after the middle map, the
result is re-weighted channelwise by a residual squeeze-excitation gate,
and the same step repeats against the shallow map. Upsampling and
concatenation carry no parameters; only the two gates are trainable.
"""
from __future__ import annotations

import numpy as np

from . import ndcore as nd
from .backbone import CorrelationPyramid
from .ndcore import NDArray
from .nn import Conv2d, Linear, Module

SE_REDUCTION = 16


class ResidualSE(Module):
    """x + x * s with s = sigmoid(W2 relu(W1 gap(x))) per channel."""

    def __init__(self, channels: int, reduction: int = SE_REDUCTION, rng=None):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        self.channels, self.reduction = channels, reduction
        self.fc1 = Linear(channels, channels // reduction, bias=False, rng=rng)
        self.fc2 = Linear(channels // reduction, channels, bias=False, rng=rng)

    def gate(self, x: NDArray) -> NDArray:
        z = nd.global_avg_pool(x)
        return nd.sigmoid(self.fc2(nd.relu(self.fc1(z))))

    def forward(self, x: NDArray, force_gate: float | None = None) -> NDArray:
        """``force_gate`` replaces s with a constant (test hook)."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise nd.DimensionError(f"residual_se: expects {self.channels} channels on axis 1, got {x.shape}")
        if force_gate is None:
            s = self.gate(x)
        else:
            s = nd.NDArray(np.full(x.shape[:2], force_gate), dtype=x.dtype)
        return x + nd.hadamard(x, s)

    def cost(self, shape, prefix=""):
        n, c, h, w = shape
        _, r1 = self.fc1.cost((n, c), f"{prefix}.fc1")
        _, r2 = self.fc2.cost((n, c // self.reduction), f"{prefix}.fc2")
        return shape, r1 + r2


class HFC(Module):
    def __init__(self, dims: tuple[int, int, int], reduction: int = SE_REDUCTION, rng=None):
        super().__init__()
        c_shallow, c_mid, c_deep = dims
        self.dims = tuple(dims)
        self.se1 = ResidualSE(c_mid + c_deep, reduction, rng=rng)
        self.se2 = ResidualSE(c_shallow + c_mid + c_deep, reduction, rng=rng)

    @property
    def out_channels(self) -> int:
        return sum(self.dims)

    def forward(self, pyramid: CorrelationPyramid, force_gate: float | None = None) -> NDArray:
        o = self.se1(nd.concat_channels(pyramid.m_mid, nd.upsample_nearest2x(pyramid.m_deep)), force_gate)
        return self.se2(nd.concat_channels(pyramid.m_shallow, nd.upsample_nearest2x(o)), force_gate)

    def channel_trace(self) -> list[int]:
        c_shallow, c_mid, c_deep = self.dims
        return [c_deep, c_mid + c_deep, c_shallow + c_mid + c_deep]

    def cost(self, shapes, prefix=""):
        s_shallow, s_mid, s_deep = shapes
        n = s_deep[0]
        rows = [(f"{prefix}.upsample1", 0, 0), (f"{prefix}.concat1", 0, 0)]
        x1 = (n, s_mid[1] + s_deep[1], s_mid[2], s_mid[3])
        _, r = self.se1.cost(x1, f"{prefix}.se1")
        rows += r + [(f"{prefix}.upsample2", 0, 0), (f"{prefix}.concat2", 0, 0)]
        x2 = (n, s_shallow[1] + x1[1], s_shallow[2], s_shallow[3])
        _, r = self.se2.cost(x2, f"{prefix}.se2")
        return x2, rows + r


class AdditionFusion(Module):
    """Ablation baseline: project deep/mid maps to the shallow width with
    bias-free 1x1 convs, upsample and sum with the shallow map."""

    def __init__(self, dims: tuple[int, int, int], rng=None):
        super().__init__()
        c_shallow, c_mid, c_deep = dims
        self.proj_mid = Conv2d(c_mid, c_shallow, 1, bias=False, rng=rng)
        self.proj_deep = Conv2d(c_deep, c_shallow, 1, bias=False, rng=rng)

    def forward(self, pyramid: CorrelationPyramid) -> NDArray:
        deep = nd.upsample_nearest2x(nd.upsample_nearest2x(self.proj_deep(pyramid.m_deep)))
        mid = nd.upsample_nearest2x(self.proj_mid(pyramid.m_mid))
        return pyramid.m_shallow + mid + deep

    def cost(self, shapes, prefix=""):
        s_shallow, s_mid, s_deep = shapes
        _, r1 = self.proj_mid.cost(s_mid, f"{prefix}.proj_mid")
        _, r2 = self.proj_deep.cost(s_deep, f"{prefix}.proj_deep")
        return s_shallow, r1 + r2

