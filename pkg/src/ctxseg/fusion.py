"""Multi-head cross-attention from visual cells (queries) to label embeddings
(keys and values)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeatureMap
from .layers import LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class FusionConfig:
    heads: int = 4
    residual: bool = True


def scaled_logits(q: Tensor, k: Tensor, d_k: int) -> Tensor:
    """``q k^T / sqrt(d_k)`` over the last two axes."""
    return (q @ T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (1.0 / np.sqrt(d_k))


class CrossAttention(Module):
    def __init__(self, width: int, emb_dim: int, cfg: FusionConfig, rng, dtype=np.float32):
        if width % cfg.heads:
            raise ValueError(f"fusion width {width} not divisible by {cfg.heads} heads")
        self.width, self.heads, self.residual = width, cfg.heads, cfg.residual
        self.q = Linear(width, width, rng, dtype)
        self.k = Linear(emb_dim, width, rng, dtype)
        self.v = Linear(emb_dim, width, rng, dtype)
        self.out = Linear(width, width, rng, dtype)
        self.norm = LayerNorm(width, dtype) if cfg.residual else None

    @property
    def d_k(self) -> int:
        return self.width // self.heads

    def _weights(self, x: Tensor, emb: Tensor) -> tuple[Tensor, Tensor]:
        b, hw, c = x.shape
        n, h, dk = emb.shape[0], self.heads, self.d_k
        if c != self.width:
            raise ValueError(f"feature width {c} != fusion width {self.width}")
        q = self.q(x).reshape(b, hw, h, dk).transpose(0, 2, 1, 3)
        k = self.k(emb).reshape(n, h, dk).transpose(1, 0, 2)
        v = self.v(emb).reshape(n, h, dk).transpose(1, 0, 2)
        return T.softmax(scaled_logits(q, k, dk), axis=-1), v

    def attention_weights(self, f: FeatureMap, emb: Tensor) -> Tensor:
        """(B, H, W, heads, n) weights over labels."""
        b, hh, ww, c = f.values.shape
        attn, _ = self._weights(f.values.reshape(b, hh * ww, c), emb)
        return attn.transpose(0, 2, 1, 3).reshape(b, hh, ww, self.heads, emb.shape[0])

    def __call__(self, f: FeatureMap, emb: Tensor, return_weights: bool = False):
        b, hh, ww, c = f.values.shape
        x = f.values.reshape(b, hh * ww, c)
        attn, v = self._weights(x, emb)
        mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(b, hh * ww, c)
        y = self.out(mixed)
        if self.residual:
            y = self.norm(x + y)
        fused = FeatureMap(y.reshape(b, hh, ww, c))
        if return_weights:
            return fused, attn.transpose(0, 2, 1, 3).reshape(b, hh, ww, self.heads, emb.shape[0])
        return fused


def cross_attention(fv: FeatureMap, emb: Tensor, layer: CrossAttention) -> FeatureMap:
    return layer(fv, emb)


def attention_weights(fv: FeatureMap, emb: Tensor, layer: CrossAttention) -> Tensor:
    return layer.attention_weights(fv, emb)
