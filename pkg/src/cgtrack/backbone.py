"""LeViT-style hierarchical one-stream backbone.

Template and search images share a stride-16 patch embedding; their tokens
are joined into one sequence so attention models both images jointly.
Shrink-attention modules between stages subsample each image's token grid
by 2 in both directions while widening the channel dimension. The search
tokens at the end of every stage are reshaped back into 2-D maps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import NDArray
from .nn import Activation, ConvBN, Linear, Module, Parameter, Sequential, trunc_normal

KEY_DIM = 16
VALUE_DIM = 32
SHRINK_VALUE_DIM = 64
MLP_RATIO = 2
PATCH_STRIDE = 16


@dataclass(frozen=True)
class BackboneConfig:
    stage_dims: tuple[int, int, int] = (384, 512, 768)
    stage_depths: tuple[int, int, int] = (4, 4, 4)
    stage_heads: tuple[int, int, int] = (6, 9, 12)
    key_dim_per_head: int = KEY_DIM
    value_dim_per_head: int = VALUE_DIM
    mlp_ratio: int = MLP_RATIO
    template_size: int = 128
    search_size: int = 256
    patch_stride: int = PATCH_STRIDE

    def __post_init__(self):
        d = self.stage_dims
        if not (d[0] < d[1] < d[2]):
            raise ValueError(f"stage_dims must be strictly increasing, got {d}")
        if d[0] % 8:
            raise ValueError("stage_dims[0] must be divisible by 8 for the patch embedding schedule")
        step = self.patch_stride * 4
        for name in ("template_size", "search_size"):
            if getattr(self, name) % step:
                raise ValueError(f"{name}={getattr(self, name)} is not divisible by {step}")

    @property
    def template_grid(self) -> int:
        return self.template_size // self.patch_stride

    @property
    def search_grid(self) -> int:
        return self.search_size // self.patch_stride


VARIANTS = {
    "B": BackboneConfig((384, 512, 768), (4, 4, 4), (6, 9, 12)),
    "S": BackboneConfig((128, 256, 384), (4, 4, 4), (4, 6, 8)),
    "T": BackboneConfig((128, 256, 384), (2, 3, 4), (4, 6, 8)),
}


@dataclass
class Segments:
    """Per-image square token grids inside the joined sequence."""
    template_grid: int
    search_grid: int

    @property
    def boundary(self) -> int:
        return self.template_grid ** 2

    @property
    def length(self) -> int:
        return self.template_grid ** 2 + self.search_grid ** 2

    def shrunk(self) -> "Segments":
        return Segments((self.template_grid + 1) // 2, (self.search_grid + 1) // 2)

    def strided_indices(self) -> np.ndarray:
        """Token indices at even rows/columns of each grid, template first."""
        out = []
        offset = 0
        for g in (self.template_grid, self.search_grid):
            grid = np.arange(g * g).reshape(g, g)[::2, ::2]
            out.append(grid.reshape(-1) + offset)
            offset += g * g
        return np.concatenate(out)


@dataclass
class CorrelationPyramid:
    m_shallow: NDArray
    m_mid: NDArray
    m_deep: NDArray

    def maps(self) -> tuple[NDArray, NDArray, NDArray]:
        return self.m_shallow, self.m_mid, self.m_deep


class PatchEmbed(Sequential):
    """Four stride-2 3x3 conv-BN layers, 3 -> C/8 -> C/4 -> C/2 -> C."""

    def __init__(self, dim: int, rng=None):
        chans = [3, dim // 8, dim // 4, dim // 2, dim]
        layers = []
        for i in range(4):
            layers.append(ConvBN(chans[i], chans[i + 1], 3, 2, 1, rng=rng))
            if i < 3:
                layers.append(Activation("hardswish"))
        super().__init__(*layers)
        self.dim = dim

    def forward(self, image: NDArray) -> NDArray:
        h, w = image.shape[2:]
        if image.ndim != 4 or image.shape[1] != 3 or h % PATCH_STRIDE or w % PATCH_STRIDE:
            raise nd.DimensionError(f"patch_embed needs [N,3,H,W] with H, W divisible by 16, got {image.shape}")
        return super().forward(image)


def join_tokens(z: NDArray, x: NDArray) -> tuple[NDArray, Segments]:
    """Flatten two [N,C,g,g] grids and concatenate them along the token axis."""
    if z.shape[1] != x.shape[1]:
        raise nd.DimensionError(f"join_tokens: channel mismatch {z.shape[1]} vs {x.shape[1]} (axis 1)")
    if z.shape[2] != z.shape[3] or x.shape[2] != x.shape[3]:
        raise nd.DimensionError(f"join_tokens needs square grids, got {z.shape} and {x.shape}")
    seg = Segments(z.shape[2], x.shape[2])
    zt = grid_to_tokens(z)
    xt = grid_to_tokens(x)
    return nd.concat([zt, xt], axis=1), seg


def split_tokens(tokens: NDArray, seg: Segments) -> tuple[NDArray, NDArray]:
    """Inverse of ``join_tokens``: back to two [N,C,g,g] grids."""
    b = seg.boundary
    z = tokens_to_grid(tokens[:, :b], seg.template_grid)
    x = tokens_to_grid(tokens[:, b:], seg.search_grid)
    return z, x


def grid_to_tokens(grid: NDArray) -> NDArray:
    n, c, h, w = grid.shape
    return grid.reshape(n, c, h * w).transpose(0, 2, 1)


def tokens_to_grid(tokens: NDArray, g: int) -> NDArray:
    n, t, c = tokens.shape
    if t != g * g:
        raise nd.DimensionError(f"{t} tokens do not form a {g}x{g} grid")
    return tokens.transpose(0, 2, 1).reshape(n, c, g, g)


class PositionEncoding(Module):
    """Learned absolute embeddings, one table per image."""

    def __init__(self, dim: int, template_grid: int, search_grid: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.template_table = Parameter(trunc_normal(rng, (template_grid ** 2, dim)))
        self.search_table = Parameter(trunc_normal(rng, (search_grid ** 2, dim)))

    def forward(self, tokens: NDArray, seg: Segments) -> NDArray:
        if seg.template_grid ** 2 != self.template_table.shape[0] or seg.search_grid ** 2 != self.search_table.shape[0]:
            raise nd.DimensionError(
                f"position tables {self.template_table.shape[0]}/{self.search_table.shape[0]} do not match "
                f"grids {seg.template_grid}^2/{seg.search_grid}^2")
        table = nd.concat([self.template_table, self.search_table], axis=0)
        return tokens + nd.repeat_batch(table, tokens.shape[0])

    def cost(self, shape, prefix=""):
        return shape, [(prefix, self._own_params(), 0)]


def _split_heads(t: NDArray, heads: int) -> NDArray:
    n, l, d = t.shape
    return t.reshape(n, l, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(t: NDArray) -> NDArray:
    n, h, l, d = t.shape
    return t.transpose(0, 2, 1, 3).reshape(n, l, h * d)


class Attention(Module):
    """Multi-head attention; hardswish on the head outputs before projection."""

    def __init__(self, dim: int, heads: int, key_dim: int = KEY_DIM, value_dim: int = VALUE_DIM, rng=None):
        super().__init__()
        self.heads, self.key_dim, self.value_dim = heads, key_dim, value_dim
        self.scale = key_dim ** -0.5
        self.qkv = Linear(dim, heads * (2 * key_dim + value_dim), rng=rng)
        self.proj = Linear(heads * value_dim, dim, rng=rng)
        self.keep_attention = False
        self.last_attention: np.ndarray | None = None

    def forward(self, x: NDArray) -> NDArray:
        n, l, _ = x.shape
        h, kd, vd = self.heads, self.key_dim, self.value_dim
        qkv = self.qkv(x).reshape(n, l, h, 2 * kd + vd).transpose(0, 2, 1, 3)
        q = qkv[:, :, :, :kd]
        k = qkv[:, :, :, kd:2 * kd]
        v = qkv[:, :, :, 2 * kd:]
        attn = nd.softmax((q @ k.transpose(0, 1, 3, 2)) * self.scale, axis=-1)
        if self.keep_attention:
            self.last_attention = attn.data
        out = nd.hardswish(_merge_heads(attn @ v))
        return self.proj(out)

    def cost(self, shape, prefix=""):
        n, l, d = shape
        _, rows = self.qkv.cost(shape, f"{prefix}.qkv")
        h = self.heads
        rows.append((f"{prefix}.matmul", 0, n * h * l * l * (self.key_dim + self.value_dim)))
        out, r = self.proj.cost((n, l, h * self.value_dim), f"{prefix}.proj")
        return out, rows + r


class MLP(Module):
    def __init__(self, dim: int, ratio: int = MLP_RATIO, rng=None):
        super().__init__()
        self.fc1 = Linear(dim, dim * ratio, rng=rng)
        self.fc2 = Linear(dim * ratio, dim, rng=rng)

    def forward(self, x):
        return self.fc2(nd.hardswish(self.fc1(x)))

    def cost(self, shape, prefix=""):
        s, r1 = self.fc1.cost(shape, f"{prefix}.fc1")
        s, r2 = self.fc2.cost(s, f"{prefix}.fc2")
        return s, r1 + r2


class Block(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = MLP_RATIO, rng=None,
                 key_dim: int = KEY_DIM, value_dim: int = VALUE_DIM):
        super().__init__()
        self.attn = Attention(dim, heads, key_dim, value_dim, rng=rng)
        self.mlp = MLP(dim, mlp_ratio, rng=rng)

    def forward(self, x):
        x = x + self.attn(x)
        return x + self.mlp(x)

    def cost(self, shape, prefix=""):
        _, r1 = self.attn.cost(shape, f"{prefix}.attn")
        _, r2 = self.mlp.cost(shape, f"{prefix}.mlp")
        return shape, r1 + r2


class ShrinkAttention(Module):
    """Queries from the 2x-strided positions of each image grid, keys/values
    from the whole joined sequence; projects dim_in -> dim_out, then a
    residual MLP at the new width."""

    def __init__(self, dim_in: int, dim_out: int, mlp_ratio: int = MLP_RATIO, rng=None,
                 key_dim: int = KEY_DIM, value_dim: int = SHRINK_VALUE_DIM):
        super().__init__()
        self.heads = dim_in // key_dim
        self.key_dim, self.value_dim = key_dim, value_dim
        self.scale = key_dim ** -0.5
        self.q = Linear(dim_in, self.heads * key_dim, rng=rng)
        self.kv = Linear(dim_in, self.heads * (key_dim + value_dim), rng=rng)
        self.proj = Linear(self.heads * value_dim, dim_out, rng=rng)
        self.mlp = MLP(dim_out, mlp_ratio, rng=rng)

    def forward(self, x: NDArray, seg: Segments) -> tuple[NDArray, Segments]:
        for g in (seg.template_grid, seg.search_grid):
            if g < 1:
                raise nd.DimensionError("shrink_attention: empty segment grid")
        if x.shape[1] != seg.length:
            raise nd.DimensionError(f"shrink_attention: {x.shape[1]} tokens but segments hold {seg.length}")
        n, l, _ = x.shape
        h, kd, vd = self.heads, self.key_dim, self.value_dim
        sub = x[:, seg.strided_indices()]
        q = _split_heads(self.q(sub), h)
        kv = self.kv(x).reshape(n, l, h, kd + vd).transpose(0, 2, 1, 3)
        k = kv[:, :, :, :kd]
        v = kv[:, :, :, kd:]
        attn = nd.softmax((q @ k.transpose(0, 1, 3, 2)) * self.scale, axis=-1)
        out = self.proj(nd.hardswish(_merge_heads(attn @ v)))
        out = out + self.mlp(out)
        return out, seg.shrunk()

    def cost(self, shape, prefix="", seg: Segments | None = None):
        n, l, d = shape
        lq = seg.shrunk().length if seg else l // 4
        _, rows = self.q.cost((n, lq, d), f"{prefix}.q")
        _, r = self.kv.cost(shape, f"{prefix}.kv")
        rows += r
        rows.append((f"{prefix}.matmul", 0, n * self.heads * lq * l * (self.key_dim + self.value_dim)))
        out, r = self.proj.cost((n, lq, self.heads * self.value_dim), f"{prefix}.proj")
        rows += r
        _, r = self.mlp.cost(out, f"{prefix}.mlp")
        return out, rows + r


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        d = cfg.stage_dims
        self.patch_embed = PatchEmbed(d[0], rng=rng)
        self.pos = PositionEncoding(d[0], cfg.template_grid, cfg.search_grid, rng=rng)
        kd, vd = cfg.key_dim_per_head, cfg.value_dim_per_head
        self.stages = [
            Sequential(*[Block(d[i], cfg.stage_heads[i], cfg.mlp_ratio, rng=rng, key_dim=kd, value_dim=vd)
                         for _ in range(cfg.stage_depths[i])])
            for i in range(3)
        ]
        self.shrinks = [ShrinkAttention(d[i], d[i + 1], cfg.mlp_ratio, rng=rng, key_dim=kd) for i in range(2)]
        for i in range(3):
            self._modules[f"stage{i}"] = self.stages[i]
        for i in range(2):
            self._modules[f"shrink{i}"] = self.shrinks[i]

    def embed(self, image: NDArray) -> NDArray:
        return self.patch_embed(image)

    def forward(self, template: NDArray, search: NDArray) -> CorrelationPyramid:
        return self.forward_embedded(self.embed(template), self.embed(search))

    def forward_embedded(self, z: NDArray, x: NDArray) -> CorrelationPyramid:
        tokens, seg = join_tokens(z, x)
        tokens = self.pos(tokens, seg)
        maps = []
        for i in range(3):
            tokens = self.stages[i](tokens)
            maps.append(tokens_to_grid(tokens[:, seg.boundary:], seg.search_grid))
            if i < 2:
                tokens, seg = self.shrinks[i](tokens, seg)
        return CorrelationPyramid(*maps)

    def cost(self, shape, prefix=""):
        """``shape`` is ((N,3,Hz,Wz), (N,3,Hx,Wx))."""
        zs, xs = shape
        z_out, rows = self.patch_embed.cost(zs, f"{prefix}.patch_embed[template]")
        x_out, r = self.patch_embed.cost(xs, f"{prefix}.patch_embed[search]")
        # the embedding is shared: count its parameters once
        rows += [(name, 0, macs) for name, _, macs in r]
        seg = Segments(z_out[2], x_out[2])
        tok = (zs[0], seg.length, z_out[1])
        _, r = self.pos.cost(tok, f"{prefix}.pos")
        rows += r
        out_shapes = []
        for i in range(3):
            tok, r = self.stages[i].cost(tok, f"{prefix}.stage{i}")
            rows += r
            out_shapes.append((tok[0], tok[2], seg.search_grid, seg.search_grid))
            if i < 2:
                tok, r = self.shrinks[i].cost(tok, f"{prefix}.shrink{i}", seg)
                rows += r
                seg = seg.shrunk()
        return tuple(out_shapes), rows
