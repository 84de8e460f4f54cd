"""Hierarchical windowed-attention encoder producing the visual feature map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import MLP, LayerNorm, Linear, Module, param
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass
class FeatureMap:
    """Batched spatial grid of feature vectors, ``values`` is (B, H, W, C)."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError(f"feature map must be (B, H, W, C), got {self.values.shape}")
        if self.height < 1 or self.width < 1:
            raise ValueError("feature map needs H, W >= 1")

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def channels(self) -> int:
        return self.values.shape[3]


@dataclass
class BackboneConfig:
    patch_size: int = 4
    widths: tuple[int, ...] = (32, 64)
    depths: tuple[int, ...] = (2, 2)
    window: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    rel_pos_bias: bool = True

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.depths = tuple(self.depths)
        if len(self.widths) != len(self.depths) or not self.widths:
            raise ValueError("widths and depths must be non-empty and equally long")
        for a, b in zip(self.widths, self.widths[1:]):
            if b != 2 * a:
                raise ValueError(f"stage widths must double, got {self.widths}")
        for w in self.widths:
            if w % self.heads:
                raise ValueError(f"width {w} not divisible by {self.heads} heads")
        if self.patch_size < 1 or self.window < 1:
            raise ValueError("patch size and window must be positive")

    def grid_shapes(self, height: int, width: int) -> list[tuple[int, int]]:
        """Grid extents at every stage; raises if the image violates divisibility."""
        p = self.patch_size
        if height % p or width % p:
            raise ValueError(f"image {height}x{width} not divisible by patch size {p}")
        h, w = height // p, width // p
        shapes = []
        for stage in range(len(self.widths)):
            if stage:
                if h % 2 or w % 2:
                    raise ValueError(f"cannot merge odd grid {h}x{w}")
                h, w = h // 2, w // 2
            if h % self.window or w % self.window:
                raise ValueError(f"grid {h}x{w} at stage {stage} not divisible by window {self.window}")
            shapes.append((h, w))
        return shapes


def image_to_tensor(images: np.ndarray, dtype=np.float32) -> Tensor:
    """uint8 (B, H, W, 3) or (H, W, 3) images to a [0, 1] float tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    dtype = np.dtype(dtype)
    return Tensor(arr.astype(dtype) / dtype.type(255.0))


class PatchEmbed(Module):
    def __init__(self, patch: int, dim: int, rng, dtype=np.float32):
        self.patch = patch
        self.proj = Linear(patch * patch * 3, dim, rng, dtype)

    def __call__(self, images: Tensor) -> FeatureMap:
        return FeatureMap(self.proj(patchify(images, self.patch)))


def patchify(images: Tensor, p: int) -> Tensor:
    """(B, H, W, 3) -> (B, H/p, W/p, p*p*3), each patch flattened row-major as (dy, dx, rgb)."""
    b, h, w, c = images.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h // p, w // p, p * p * c)


def relative_position_index(w: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(w), np.arange(w), indexing="ij")
    ys, xs = ys.reshape(-1), xs.reshape(-1)
    dy = ys[:, None] - ys[None, :] + w - 1
    dx = xs[:, None] - xs[None, :] + w - 1
    return (dy * (2 * w - 1) + dx).reshape(-1)


def window_partition(x: Tensor, w: int) -> Tensor:
    b, h, wd, c = x.shape
    x = x.reshape(b, h // w, w, wd // w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * (h // w) * (wd // w), w * w, c)


def window_merge(x: Tensor, w: int, b: int, h: int, wd: int) -> Tensor:
    c = x.shape[-1]
    x = x.reshape(b, h // w, wd // w, w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, wd, c)


class WindowAttentionBlock(Module):
    """Self-attention inside non-overlapping w x w windows plus a feedforward.

    ``offset`` shifts the window grid by that many cells; the border is zero
    padded and padded cells are masked out as keys.
    """

    def __init__(self, dim: int, heads: int, window: int, offset: int, rng,
                 rel_pos_bias: bool = True, mlp_ratio: int = 2, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.window, self.offset = dim, heads, window, offset
        self.norm1 = LayerNorm(dim, dtype)
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        self.rel_bias = (param(rng.normal(0.0, 0.02, size=((2 * window - 1) ** 2, heads)), dtype)
                         if rel_pos_bias else None)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, rng, dtype)

    def attention(self, x: Tensor) -> Tensor:
        b, h, wd, c = x.shape
        w, s = self.window, self.offset
        if h % w or wd % w:
            raise ValueError(f"grid {h}x{wd} not divisible by window {w}")
        if s:
            x = T.pad(x, ((0, 0), (s, w - s), (s, w - s), (0, 0)))
        hp, wp = x.shape[1], x.shape[2]
        win = window_partition(x, w)
        n, tok = win.shape[0], win.shape[1]
        dh = c // self.heads
        qkv = self.qkv(win).reshape(n, tok, 3, self.heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        if self.rel_bias is not None:
            bias = T.gather(self.rel_bias, relative_position_index(w))
            logits = logits + bias.reshape(tok, tok, self.heads).transpose(2, 0, 1)
        if s:
            valid = np.zeros((hp, wp), dtype=bool)
            valid[s:s + h, s:s + wd] = True
            keymask = valid.reshape(hp // w, w, wp // w, w).transpose(0, 2, 1, 3).reshape(-1, tok)
            add = np.where(keymask, 0.0, MASK_VALUE).astype(x.dtype)
            logits = logits + np.tile(add, (b, 1))[:, None, None, :]
        attn = T.softmax(logits, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(n, tok, c)
        out = window_merge(self.proj(out), w, b, hp, wp)
        if s:
            out = out[:, s:s + h, s:s + wd]
        return out

    def __call__(self, f: FeatureMap) -> FeatureMap:
        x = f.values
        x = x + self.attention(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return FeatureMap(x)


class PatchMerge(Module):
    """Halve the grid; each 2x2 neighbourhood (row-major order) is concatenated
    and linearly projected to twice the channels."""

    def __init__(self, dim: int, rng, dtype=np.float32):
        self.proj = Linear(4 * dim, 2 * dim, rng, dtype)

    def __call__(self, f: FeatureMap) -> FeatureMap:
        x = f.values
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"patch merge needs even extents, got {h}x{w}")
        x = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4 * c)
        return FeatureMap(self.proj(x))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.patch_size, cfg.widths[0], rng, dtype)
        self.stages: list[Module] = []
        self.merges: list[Module] = []
        for i, (dim, depth) in enumerate(zip(cfg.widths, cfg.depths)):
            if i:
                self.merges.append(PatchMerge(cfg.widths[i - 1], rng, dtype))
            for j in range(depth):
                self.stages.append(WindowAttentionBlock(
                    dim, cfg.heads, cfg.window, (cfg.window // 2) * (j % 2), rng,
                    rel_pos_bias=cfg.rel_pos_bias, mlp_ratio=cfg.mlp_ratio, dtype=dtype))

    def __call__(self, images: Tensor) -> FeatureMap:
        self.cfg.grid_shapes(images.shape[1], images.shape[2])
        f = self.embed(images)
        k = 0
        for i, depth in enumerate(self.cfg.depths):
            if i:
                f = self.merges[i - 1](f)
            for _ in range(depth):
                f = self.stages[k](f)
                k += 1
        return f


def upsample_nearest(f: FeatureMap, factor: int) -> FeatureMap:
    x = T.repeat(T.repeat(f.values, factor, axis=1), factor, axis=2)
    return FeatureMap(x)


def backbone_forward(backbone: Backbone, images: Tensor, label_hw: tuple[int, int] | None = None):
    """Run the encoder; also return the map upsampled to ``label_hw`` when given."""
    f = backbone(images)
    if label_hw is None:
        return f, None
    fy, fx = label_hw[0] // f.height, label_hw[1] // f.width
    if fy != fx or fy * f.height != label_hw[0] or fx * f.width != label_hw[1]:
        raise ValueError(f"label grid {label_hw} is not an integer upsampling of {f.height}x{f.width}")
    return f, upsample_nearest(f, fy)
