"""Lightweight gated center head and box decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import NDArray
from .nn import BatchNorm2d, Conv2d, DepthwiseConv2d, Module, Sequential, trunc_normal

HEAD_WIDTH = 256
EG_RATIO = 2
EG_BLOCKS = 4
HANNING_WEIGHT = 0.49
CLS_PRIOR = 0.1
SIZE_PRIOR = 0.25  # a 4x-context search crop spans four target sides
OUTPUT_INIT_STD = 1e-3


@dataclass
class HeadOutputs:
    score: NDArray   # [N,1,g,g]
    offset: NDArray  # [N,2,g,g]  (x, y)
    size: NDArray    # [N,2,g,g]  (w, h)


class EGBlock(Module):
    """Efficient gating block.

    O = BN(DW7(x)); P = relu6(conv_gate(O)) * conv_ctx(O);
    out = BN(conv_proj(DW7(P))). No residual connection.
    """

    def __init__(self, channels: int, ratio: int = EG_RATIO, rng=None):
        super().__init__()
        hidden = channels * ratio
        self.channels, self.ratio = channels, ratio
        self.dw1 = DepthwiseConv2d(channels, 7, rng=rng)
        self.bn1 = BatchNorm2d(channels)
        self.expand_gate = Conv2d(channels, hidden, 1, rng=rng)
        self.expand_ctx = Conv2d(channels, hidden, 1, rng=rng)
        self.dw2 = DepthwiseConv2d(hidden, 7, rng=rng)
        self.project = Conv2d(hidden, channels, 1, rng=rng)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: NDArray) -> NDArray:
        o = self.bn1(self.dw1(x))
        p = nd.hadamard(nd.relu6(self.expand_gate(o)), self.expand_ctx(o))
        return self.bn2(self.project(self.dw2(p)))

    def cost(self, shape, prefix=""):
        rows = []
        s, r = self.dw1.cost(shape, f"{prefix}.dw1"); rows += r
        s, r = self.bn1.cost(s, f"{prefix}.bn1"); rows += r
        h, r = self.expand_gate.cost(s, f"{prefix}.expand_gate"); rows += r
        _, r = self.expand_ctx.cost(s, f"{prefix}.expand_ctx"); rows += r
        h, r = self.dw2.cost(h, f"{prefix}.dw2"); rows += r
        s, r = self.project.cost(h, f"{prefix}.project"); rows += r
        s, r = self.bn2.cost(s, f"{prefix}.bn2"); rows += r
        return s, rows


def eg_param_formula(c: int, r: int) -> int:
    """Closed-form trainable parameter count of one EG block."""
    return (49 * c + c + 2 * c) + 2 * (r * c * c + r * c) + (49 * r * c + r * c) + (r * c * c + c) + 2 * c


class Branch(Sequential):
    def __init__(self, width: int, out_channels: int, ratio: int, blocks: int = EG_BLOCKS, rng=None):
        layers = [EGBlock(width, ratio, rng=rng) for _ in range(blocks)]
        out = Conv2d(width, out_channels, 1, rng=rng)
        # small output weights keep every cell off the sigmoid plateaus at start
        out.weight.data = trunc_normal(rng or np.random.default_rng(0), out.weight.shape, OUTPUT_INIT_STD).astype(
            out.weight.dtype)
        out.bias.data[:] = 0.0
        layers.append(out)
        super().__init__(*layers)

    def forward(self, x):
        return nd.sigmoid(super().forward(x))


class LGCH(Module):
    def __init__(self, in_channels: int, width: int = HEAD_WIDTH, ratio: int = EG_RATIO,
                 blocks: int = EG_BLOCKS, rng=None):
        super().__init__()
        self.in_channels, self.width, self.ratio = in_channels, width, ratio
        self.reduce = Conv2d(in_channels, width, 1, rng=rng)
        self.cls = Branch(width, 1, ratio, blocks, rng=rng)
        self.offset = Branch(width, 2, ratio, blocks, rng=rng)
        self.size = Branch(width, 2, ratio, blocks, rng=rng)
        # start the score map near a low positive prior
        self.cls[-1].bias.data[:] = -np.log((1 - CLS_PRIOR) / CLS_PRIOR)
        # and the size map near the typical target extent: behind the output
        # BN the features are zero-mean, so only the bias can set that level
        self.size[-1].bias.data[:] = -np.log((1 - SIZE_PRIOR) / SIZE_PRIOR)

    def forward(self, fused: NDArray) -> HeadOutputs:
        if fused.ndim != 4 or fused.shape[1] != self.in_channels:
            raise nd.DimensionError(f"head expects {self.in_channels} channels on axis 1, got {fused.shape}")
        x = self.reduce(fused)
        return HeadOutputs(self.cls(x), self.offset(x), self.size(x))

    def cost(self, shape, prefix=""):
        s, rows = self.reduce.cost(shape, f"{prefix}.reduce")
        for name in ("cls", "offset", "size"):
            _, r = getattr(self, name).cost(s, f"{prefix}.{name}")
            rows += r
        n, _, h, w = s
        return ((n, 1, h, w), (n, 2, h, w), (n, 2, h, w)), rows


def hann2d(g: int) -> np.ndarray:
    """Raised-cosine window without zero edges, peaked at the grid center."""
    k = np.arange(1, g + 1)
    w = 0.5 * (1 - np.cos(2 * np.pi * k / (g + 1)))
    return np.outer(w, w)


def decode_box(score: np.ndarray, offset: np.ndarray, size: np.ndarray,
               hanning_weight: float = HANNING_WEIGHT) -> tuple[tuple[float, float, float, float], float]:
    """Box (cx, cy, w, h) in normalized crop coordinates plus the peak score.

    Takes the maps of one sample: score [g,g] (or [1,g,g]), offset/size [2,g,g].
    """
    score = np.asarray(score, dtype=np.float64).reshape(np.shape(score)[-2:])
    g = score.shape[0]
    blended = (1 - hanning_weight) * score + hanning_weight * (score * hann2d(g))
    idx = int(np.argmax(blended))  # first maximum in row-major order
    i, j = divmod(idx, g)
    cx = (j + float(offset[0, i, j])) / g
    cy = (i + float(offset[1, i, j])) / g
    return (cx, cy, float(size[0, i, j]), float(size[1, i, j])), float(score[i, j])


def decode_outputs(outputs: HeadOutputs, hanning_weight: float = HANNING_WEIGHT):
    """Decode every sample of a batch."""
    return [decode_box(outputs.score.data[b, 0], outputs.offset.data[b], outputs.size.data[b], hanning_weight)
            for b in range(outputs.score.shape[0])]
