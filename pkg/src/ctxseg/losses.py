"""Training objectives: pixel cross-entropy, pairwise margin contrastive loss,
and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .embeddings import SimilarityPairs
from .tensor import Tensor


@dataclass
class LossConfig:
    lam: float = 0.1
    margin: float = 1.0
    class_weights: list[float] | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig | None = None) -> Tensor:
    """Mean over pixels of -log p(true class); logits are (..., K), labels (...)."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels {labels.shape} do not cover logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside 0..{k - 1}")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, labels[..., None].astype(np.int64), 1.0, axis=-1)
    nll = -T.tsum(T.log_softmax(logits, axis=-1) * onehot, axis=-1)
    weights = cfg.class_weights if cfg is not None else None
    if weights is None:
        return T.mean(nll)
    w = np.asarray(weights, dtype=logits.dtype)
    if w.shape != (k,):
        raise ValueError(f"class_weights needs {k} entries")
    pw = w[labels]
    return T.tsum(nll * pw) * (1.0 / pw.sum())


def pair_targets(labels: Sequence[str], pairs: SimilarityPairs, known: Sequence[str] | None = None):
    """All unordered index pairs (i < j) with target 1 for positive pairs."""
    if known is not None:
        for a, b in pairs.pairs:
            for lab in (a, b):
                if lab not in known:
                    raise KeyError(f"unknown label {lab!r} in similarity pairs")
    ii, jj, yy = [], [], []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            ii.append(i)
            jj.append(j)
            yy.append(1.0 if pairs.is_positive(labels[i], labels[j]) else 0.0)
    return np.array(ii, dtype=np.int64), np.array(jj, dtype=np.int64), np.array(yy)


def contrastive_loss(embeddings: Tensor, labels: Sequence[str], pairs: SimilarityPairs,
                     cfg: LossConfig | None = None, known: Sequence[str] | None = None) -> Tensor:
    """Mean over all label pairs of ``y d^2 + (1 - y) max(0, m - d)^2`` where
    ``d`` is the distance between L2-normalised embeddings."""
    margin = cfg.margin if cfg is not None else 1.0
    for lab in labels:
        if known is not None and lab not in known:
            raise KeyError(f"unknown label {lab!r}")
    ii, jj, y = pair_targets(labels, pairs, known)
    if len(ii) == 0:
        raise ValueError("contrastive loss needs at least one pair")
    unit = embeddings / T.norm(embeddings, axis=-1, keepdims=True)
    diff = T.gather(unit, ii) - T.gather(unit, jj)
    d2 = T.tsum(T.square(diff), axis=-1)
    d = T.norm(diff, axis=-1)
    y = y.astype(embeddings.dtype)
    hinge = T.square(T.relu(margin - d))
    return T.mean(d2 * y + hinge * (1.0 - y))


def total_loss(l_ce: Tensor, l_con: Tensor, cfg: LossConfig) -> Tensor:
    if l_ce.data.size != 1 or l_con.data.size != 1:
        raise ValueError("total_loss expects scalar components")
    return l_ce + l_con * cfg.lam
