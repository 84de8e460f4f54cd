"""The four ablation variants.

* ``baseline``: backbone + linear per-cell classifier.
* ``+llm``: backbone, head scores cells against the label embeddings.
* ``+xattn``: adds cross-attention fusion before the head.
* ``+gnn``: adds relation refinement. A graph-free first pass gives the
  argmax mask the scene graph is built from; the head then rescores with the
  refined class table.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, FeatureMap
from .config import TrainConfig
from .embeddings import LabelEmbeddingSet
from .fusion import CrossAttention
from .graph import (GraphBatch, RelationGNN, SceneGraph, SegmentationHead, build_scene_graph,
                    class_embeddings, node_embeddings)
from .layers import Linear, Module
from .rng import make_rng
from .tensor import DTYPES, Tensor, scope

BACKBONE_STREAM, FUSION_STREAM, GNN_STREAM, HEAD_STREAM = 1, 2, 3, 4


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, H, W, n + 1) at label resolution
    first_logits: Tensor | None = None
    refined: Tensor | None = None
    graph_batch: GraphBatch | None = None
    graphs: list[SceneGraph] = field(default_factory=list)
    attention: Tensor | None = None  # (B, h, w, heads, n)


class ContextSegModel(Module):
    def __init__(self, cfg: TrainConfig, emb: LabelEmbeddingSet):
        dtype = DTYPES[cfg.train.dtype]
        self.cfg = cfg
        self.variant = cfg.variant
        self.vocab = emb.vocab
        width = cfg.backbone.widths[-1]
        n = len(emb.vocab)
        self.label_emb = Tensor(emb.vectors.astype(dtype), requires_grad=cfg.embeddings.trainable)
        self.backbone = Backbone(cfg.backbone, make_rng(cfg.seed, BACKBONE_STREAM), dtype)
        self.classifier = None
        self.head = None
        self.fusion = None
        self.gnn = None
        if self.variant == "baseline":
            self.classifier = Linear(width, n + 1, make_rng(cfg.seed, HEAD_STREAM), dtype)
        else:
            self.head = SegmentationHead(width, emb.dim, make_rng(cfg.seed, HEAD_STREAM), dtype)
        if self.variant in ("+xattn", "+gnn"):
            self.fusion = CrossAttention(width, emb.dim, cfg.fusion, make_rng(cfg.seed, FUSION_STREAM), dtype)
        if self.variant == "+gnn":
            self.gnn = RelationGNN(emb.dim, cfg.gnn, make_rng(cfg.seed, GNN_STREAM), dtype)

    @property
    def dtype(self):
        return self.label_emb.dtype

    def graphs_from_logits(self, logits: np.ndarray) -> list[SceneGraph]:
        g = self.cfg.gnn
        pred = logits.argmax(axis=-1)
        return [build_scene_graph(m, min_area=g.min_area, radius=g.radius) for m in pred]

    def graphs_from_masks(self, masks: np.ndarray) -> list[SceneGraph]:
        g = self.cfg.gnn
        return [build_scene_graph(m, min_area=g.min_area, radius=g.radius) for m in masks]

    def forward(self, images: Tensor, label_hw: tuple[int, int] | None = None,
                graphs: list[SceneGraph] | None = None) -> ForwardOutput:
        with scope("backbone"):
            f = self.backbone(images)
        label_hw = label_hw or images.shape[1:3]
        up = label_hw[0] // f.height
        if up * f.height != label_hw[0] or up * f.width != label_hw[1]:
            raise ValueError(f"label grid {label_hw} is not an integer upsampling of the feature grid")
        if self.variant == "baseline":
            with scope("head"):
                logits = self.classifier(f.values)
                if up > 1:
                    logits = T.repeat(T.repeat(logits, up, axis=1), up, axis=2)
            return ForwardOutput(logits)
        emb = self.label_emb
        attn = None
        if self.fusion is not None:
            with scope("fusion"):
                f, attn = self.fusion(f, emb, return_weights=True)
        with scope("head"):
            first = self.head(f, emb, up)
        if self.gnn is None:
            return ForwardOutput(first, attention=attn)
        if graphs is None:
            graphs = self.graphs_from_logits(first.data)
        batch = GraphBatch.from_graphs(graphs)
        with scope("gnn"):
            refined = self.gnn(node_embeddings(emb, batch), batch) if batch.num_nodes else None
            table = class_embeddings(refined, batch, emb) if refined is not None else emb
        with scope("head"):
            logits = self.head(FeatureMap(f.values), table, up)
        return ForwardOutput(logits, first, refined, batch, graphs, attn)

    __call__ = forward


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
