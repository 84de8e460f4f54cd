"""Scene graphs over object regions and relation-refined class embeddings."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .backbone import FeatureMap
from .layers import MLP, LayerNorm, Linear, Module, param
from .tensor import Tensor

EDGE_DIM = 5
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class GNNConfig:
    iterations: int = 2
    hidden: int = 64
    min_area: int = 4
    radius: float = 0.5

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.min_area < 1 or self.radius < 0:
            raise ValueError("min_area must be >= 1 and radius >= 0")


@dataclass
class SceneNode:
    class_id: int
    centroid: tuple[float, float]  # (y, x), pixel centres normalised to [0, 1]
    area: float  # fraction of the image
    bbox: tuple[int, int, int, int]  # (row0, col0, row1, col1), inclusive
    pixels: int

    def to_json(self, idx: int) -> dict:
        return {"id": idx, "class": self.class_id, "centroid": list(self.centroid),
                "area": self.area, "bbox": list(self.bbox)}


@dataclass
class SceneGraph:
    nodes: list[SceneNode] = field(default_factory=list)
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    edge_feats: np.ndarray = field(default_factory=lambda: np.zeros((0, EDGE_DIM)))

    def __post_init__(self):
        n = len(self.nodes)
        for i, j in self.edges:
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"invalid edge ({i}, {j}) for {n} nodes")
        pairs = {(int(i), int(j)) for i, j in self.edges}
        if any((j, i) not in pairs for i, j in pairs):
            raise ValueError("edge set must be symmetric")

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([nd.class_id for nd in self.nodes], dtype=np.int64)

    def to_json(self) -> dict:
        return {"nodes": [nd.to_json(i) for i, nd in enumerate(self.nodes)],
                "edges": [[int(i), int(j)] for i, j in self.edges]}


def connected_components(binary: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components, numbered 1.. in raster order of their first pixel."""
    return ndimage.label(binary, structure=FOUR_CONNECTED)


def extract_nodes(mask: np.ndarray, min_area: int = 4) -> list[SceneNode]:
    mask = np.asarray(mask)
    h, w = mask.shape
    nodes = []
    for c in np.unique(mask):
        if c == 0:
            continue
        comp, n = connected_components(mask == c)
        if n == 0:
            continue
        sizes = np.bincount(comp.ravel(), minlength=n + 1)
        for k, sl in enumerate(ndimage.find_objects(comp), start=1):
            if sizes[k] < min_area:
                continue
            rr, cc = np.nonzero(comp[sl] == k)
            rr = rr + sl[0].start
            cc = cc + sl[1].start
            nodes.append(SceneNode(
                class_id=int(c),
                centroid=(float((rr.mean() + 0.5) / h), float((cc.mean() + 0.5) / w)),
                area=float(sizes[k] / (h * w)),
                bbox=(int(sl[0].start), int(sl[1].start), int(sl[0].stop - 1), int(sl[1].stop - 1)),
                pixels=int(sizes[k]),
            ))
    return nodes


def edge_features(ni: SceneNode, nj: SceneNode) -> np.ndarray:
    """Relation of ``nj`` (sender) seen from ``ni`` (receiver):
    ``[dx, dy, distance, log(area_j / area_i), bbox_adjacent]``."""
    dy = nj.centroid[0] - ni.centroid[0]
    dx = nj.centroid[1] - ni.centroid[1]
    a, b = ni.bbox, nj.bbox
    adjacent = (a[0] <= b[2] + 1 and b[0] <= a[2] + 1 and a[1] <= b[3] + 1 and b[1] <= a[3] + 1)
    return np.array([dx, dy, np.hypot(dx, dy), np.log(nj.area / ni.area), float(adjacent)])


def build_scene_graph(mask: np.ndarray, num_classes: int | None = None, min_area: int = 4,
                      radius: float = 0.5) -> SceneGraph:
    """One node per 4-connected component of every foreground class (area >=
    ``min_area`` pixels); edges join both directions of every node pair whose
    centroid distance is at most ``radius``."""
    mask = np.asarray(mask)
    if num_classes is not None and mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ValueError(f"mask holds class ids outside 0..{num_classes - 1}")
    nodes = extract_nodes(mask, min_area)
    edges, feats = [], []
    for i, ni in enumerate(nodes):
        for j, nj in enumerate(nodes):
            if i == j:
                continue
            if np.hypot(ni.centroid[0] - nj.centroid[0], ni.centroid[1] - nj.centroid[1]) <= radius:
                edges.append((i, j))
                feats.append(edge_features(ni, nj))
    return SceneGraph(
        nodes,
        np.array(edges, dtype=np.int64).reshape(-1, 2),
        np.array(feats, dtype=np.float64).reshape(-1, EDGE_DIM),
    )


@dataclass
class GraphBatch:
    """Disjoint union of per-sample graphs."""

    node_class: np.ndarray  # (N,) class ids >= 1
    node_sample: np.ndarray  # (N,)
    receivers: np.ndarray  # (E,)
    senders: np.ndarray  # (E,)
    edge_feats: np.ndarray  # (E, EDGE_DIM)
    num_samples: int

    @classmethod
    def from_graphs(cls, graphs: list[SceneGraph]) -> "GraphBatch":
        cls_, smp, rcv, snd, feats = [], [], [], [], []
        offset = 0
        for b, g in enumerate(graphs):
            cls_.append(g.class_ids)
            smp.append(np.full(len(g.nodes), b, dtype=np.int64))
            rcv.append(g.edges[:, 0] + offset)
            snd.append(g.edges[:, 1] + offset)
            feats.append(g.edge_feats)
            offset += len(g.nodes)
        cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)  # noqa: E731
        return cls(cat(cls_, np.int64), cat(smp, np.int64), cat(rcv, np.int64), cat(snd, np.int64),
                   np.concatenate(feats).reshape(-1, EDGE_DIM) if feats else np.zeros((0, EDGE_DIM)),
                   len(graphs))

    @property
    def num_nodes(self) -> int:
        return len(self.node_class)


class RelationGNN(Module):
    def __init__(self, dim: int, cfg: GNNConfig, rng, dtype=np.float32):
        self.iterations = cfg.iterations
        self.mlp = MLP(dim + EDGE_DIM, cfg.hidden, dim, rng, dtype)
        self.norm = LayerNorm(dim, dtype)

    def __call__(self, emb: Tensor, batch: GraphBatch, iterations: int | None = None) -> Tensor:
        return message_passing(emb, batch, self, self.iterations if iterations is None else iterations)


def message_passing(emb: Tensor, batch: GraphBatch, gnn: RelationGNN, iterations: int) -> Tensor:
    """Synchronous message passing.

    Every round computes all messages ``mlp([e_j, edge(i, j)])`` from the
    previous state and sets ``e_i <- LayerNorm(e_i + mean_j message)`` for
    nodes with at least one in-edge; isolated nodes keep their embedding.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    n = emb.shape[0]
    if iterations == 0 or len(batch.receivers) == 0:
        return emb
    deg = np.bincount(batch.receivers, minlength=n)
    has_in = (deg > 0)[:, None]
    inv_deg = (1.0 / np.maximum(deg, 1))[:, None].astype(emb.dtype)
    feats = Tensor(batch.edge_feats.astype(emb.dtype))
    for _ in range(iterations):
        msg = gnn.mlp(T.concat([T.gather(emb, batch.senders), feats], axis=1))
        agg = T.segment_sum(msg, batch.receivers, n) * inv_deg
        emb = T.where(has_in, gnn.norm(emb + agg), emb)
    return emb


def node_embeddings(label_emb: Tensor, batch: GraphBatch) -> Tensor:
    """Initial node states: the label embedding of each node's class."""
    return T.gather(label_emb, batch.node_class - 1)


def class_embeddings(refined: Tensor, batch: GraphBatch, label_emb: Tensor) -> Tensor:
    """(B, n, d) per-sample class table: mean refined embedding over the
    sample's nodes of each class, falling back to ``label_emb`` for classes
    without nodes. Pooled rows are rescaled to unit length so refined and
    fallback rows share the scale of the (unit-norm) label embeddings."""
    n, d = label_emb.shape
    b = batch.num_samples
    base = T.reshape(T.concat([label_emb] * b, axis=0), (b, n, d)) if b > 1 else T.reshape(label_emb, (1, n, d))
    if batch.num_nodes == 0:
        return base
    seg = batch.node_sample * n + (batch.node_class - 1)
    counts = np.bincount(seg, minlength=b * n)
    pooled = T.segment_sum(refined, seg, b * n) * (1.0 / np.maximum(counts, 1))[:, None].astype(refined.dtype)
    pooled = pooled / (T.norm(pooled, axis=-1, keepdims=True) + np.asarray(1e-6, dtype=refined.dtype))
    present = (counts > 0).reshape(b, n, 1)
    return T.where(present, T.reshape(pooled, (b, n, d)), base)


class SegmentationHead(Module):
    """Per-cell logits as dot products between projected features and a class
    table; the background logit uses a learned vector."""

    def __init__(self, width: int, emb_dim: int, rng, dtype=np.float32):
        self.proj = Linear(width, emb_dim, rng, dtype)
        self.background = param(rng.normal(0.0, 1.0 / np.sqrt(emb_dim), size=emb_dim), dtype)

    def __call__(self, f: FeatureMap, table: Tensor, upsample: int = 1) -> Tensor:
        return segmentation_head(f, table, self, upsample)


def segmentation_head(f: FeatureMap, table: Tensor, head: SegmentationHead, upsample: int = 1) -> Tensor:
    """Logits (B, H*u, W*u, n + 1); ``table`` is (n, d) or per-sample (B, n, d).

    Scoring happens at feature resolution and the logits are repeated
    ``upsample`` times per axis, which equals scoring the nearest-neighbour
    upsampled feature map.
    """
    b, h, w, _ = f.values.shape
    d = head.background.shape[0]
    if table.ndim == 2:
        table = T.reshape(table, (1,) + table.shape)
    if table.shape[-1] != d:
        raise ValueError(f"class table dim {table.shape[-1]} != head dim {d}")
    bg = T.reshape(head.background, (1, 1, d))
    if table.shape[0] > 1:
        bg = T.concat([bg] * table.shape[0], axis=0)
    full = T.concat([bg, table], axis=1)
    z = T.reshape(head.proj(f.values), (b, h * w, d))
    logits = T.reshape(z @ T.transpose(full, (0, 2, 1)), (b, h, w, full.shape[1]))
    if upsample > 1:
        logits = T.repeat(T.repeat(logits, upsample, axis=1), upsample, axis=2)
    return logits
