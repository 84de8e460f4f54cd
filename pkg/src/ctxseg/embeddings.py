"""Label vocabulary and semantic label embeddings.

Three providers fill the embedding table:

* ``hashed``: label text -> 64-bit stream id -> ``dim`` Gaussian draws.
* ``file``: UTF-8 lines ``label<TAB>v1,v2,...,vd``.
* ``remote``: HTTP POST ``<endpoint>/embed`` with ``{"labels": [...]}``,
  answered by ``{"dim": d, "vectors": {"label": [...]}}``.

Every provider's output is L2-normalized row by row.
"""
from __future__ import annotations

import json
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import make_rng, stream_id


class EmbeddingError(ValueError):
    pass


class RemoteEmbeddingError(EmbeddingError):
    pass


class MissingLabelError(EmbeddingError):
    pass


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered foreground labels. Class id 0 is background; ``labels[i]`` has id ``i + 1``."""

    labels: tuple[str, ...]
    background: str = "background"

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.labels:
            raise ValueError("vocabulary is empty")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("vocabulary labels must be unique")
        if self.background in self.labels:
            raise ValueError(f"background name {self.background!r} used as a label")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        """Including background."""
        return len(self.labels) + 1

    def class_id(self, label: str) -> int:
        if label == self.background:
            return 0
        try:
            return self.labels.index(label) + 1
        except ValueError:
            raise KeyError(f"unknown label {label!r}") from None

    def name(self, class_id: int) -> str:
        return self.background if class_id == 0 else self.labels[class_id - 1]

    def names(self) -> list[str]:
        return [self.background, *self.labels]


@dataclass(frozen=True)
class SimilarityPairs:
    """Unordered positive label pairs; every other pair is negative."""

    pairs: frozenset

    @classmethod
    def from_list(cls, pairs: Iterable[Sequence[str]]) -> "SimilarityPairs":
        out = set()
        for a, b in pairs:
            if a == b:
                raise ValueError(f"self-pair {a!r} is not allowed")
            out.add(tuple(sorted((a, b))))
        return cls(frozenset(out))

    def is_positive(self, a: str, b: str) -> bool:
        return tuple(sorted((a, b))) in self.pairs

    def to_list(self) -> list[list[str]]:
        return [list(p) for p in sorted(self.pairs)]

    def check(self, vocab: LabelVocabulary) -> None:
        for a, b in self.pairs:
            for lab in (a, b):
                if lab not in vocab.labels:
                    raise KeyError(f"similarity pair uses unknown label {lab!r}")


@dataclass
class EmbeddingConfig:
    provider: str = "hashed"
    dim: int = 32
    seed: int = 0
    path: str | None = None
    endpoint: str | None = None
    timeout: float = 5.0
    trainable: bool = False
    text_template: str = "{label}"

    def __post_init__(self):
        if self.provider not in ("hashed", "file", "remote"):
            raise ValueError(f"unknown embedding provider {self.provider!r}")
        if self.dim < 1:
            raise ValueError("embedding dim must be positive")


@dataclass
class LabelEmbeddingSet:
    vocab: LabelVocabulary
    vectors: np.ndarray  # (n, d), row i belongs to vocab.labels[i]
    provenance: str

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.vocab):
            raise ValueError("one embedding per label is required")
        if not np.isfinite(self.vectors).all():
            raise EmbeddingError("embeddings contain non-finite values")

    def vector(self, label: str) -> np.ndarray:
        return self.vectors[self.vocab.class_id(label) - 1]


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if (n == 0).any():
        raise EmbeddingError("cannot normalize a zero embedding")
    return x / n


def hashed_vectors(texts: Sequence[str], dim: int, seed: int) -> np.ndarray:
    return np.stack([make_rng(seed, stream_id(t)).standard_normal(dim) for t in texts])


def load_embedding_file(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise EmbeddingError(f"embedding file not found: {path}") from None
    out: dict[str, np.ndarray] = {}
    dim = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        label, sep, rest = line.partition("\t")
        if not sep or not label:
            raise EmbeddingError(f"{path}:{lineno}: expected 'label<TAB>v1,...,vd'")
        try:
            vec = np.array([float(v) for v in rest.split(",")], dtype=np.float64)
        except ValueError:
            raise EmbeddingError(f"{path}:{lineno}: malformed vector") from None
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise EmbeddingError(f"{path}:{lineno}: dimension mismatch ({vec.size} != {dim})")
        if label in out:
            raise EmbeddingError(f"{path}:{lineno}: duplicate label {label!r}")
        out[label] = vec
    if not out:
        raise EmbeddingError(f"embedding file is empty: {path}")
    return out


def fetch_remote_embeddings(endpoint: str, labels: Sequence[str], timeout: float = 5.0) -> dict[str, np.ndarray]:
    url = endpoint.rstrip("/") + "/embed"
    body = json.dumps({"labels": list(labels)}).encode("utf-8")
    req = urllib.request.Request(url, data=body, method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            status = resp.status
            raw = resp.read()
    except urllib.error.HTTPError as e:
        raise RemoteEmbeddingError(f"embedding service returned HTTP {e.code}") from None
    except (socket.timeout, TimeoutError):
        raise RemoteEmbeddingError(f"embedding service timed out after {timeout}s") from None
    except urllib.error.URLError as e:
        if isinstance(e.reason, (socket.timeout, TimeoutError)):
            raise RemoteEmbeddingError(f"embedding service timed out after {timeout}s") from None
        raise RemoteEmbeddingError(f"embedding service unreachable: {e.reason}") from None
    if status != 200:
        raise RemoteEmbeddingError(f"embedding service returned HTTP {status}")
    try:
        doc = json.loads(raw)
        dim = int(doc["dim"])
        vectors = doc["vectors"]
        if not isinstance(vectors, dict):
            raise TypeError
    except (ValueError, KeyError, TypeError):
        raise RemoteEmbeddingError("malformed embedding response") from None
    out = {}
    for label in labels:
        if label not in vectors:
            raise MissingLabelError(f"embedding service omitted label {label!r}")
        try:
            vec = np.asarray(vectors[label], dtype=np.float64)
        except (ValueError, TypeError):
            raise RemoteEmbeddingError(f"malformed vector for {label!r}") from None
        if vec.shape != (dim,):
            raise RemoteEmbeddingError(f"vector for {label!r} has shape {vec.shape}, expected ({dim},)")
        out[label] = vec
    return out


def embed_labels(vocab: LabelVocabulary, cfg: EmbeddingConfig) -> LabelEmbeddingSet:
    texts = [cfg.text_template.format(label=lab) for lab in vocab.labels]
    if cfg.provider == "hashed":
        raw = hashed_vectors(texts, cfg.dim, cfg.seed)
    elif cfg.provider == "file":
        if not cfg.path:
            raise EmbeddingError("file provider needs a path")
        table = load_embedding_file(cfg.path)
        missing = [lab for lab in vocab.labels if lab not in table]
        if missing:
            raise MissingLabelError(f"embedding file lacks labels: {missing}")
        raw = np.stack([table[lab] for lab in vocab.labels])
    else:
        if not cfg.endpoint:
            raise EmbeddingError("remote provider needs an endpoint")
        table = fetch_remote_embeddings(cfg.endpoint, texts, cfg.timeout)
        raw = np.stack([table[t] for t in texts])
    if raw.shape[1] != cfg.dim:
        raise EmbeddingError(f"{cfg.provider} provider returned dim {raw.shape[1]}, config expects {cfg.dim}")
    return LabelEmbeddingSet(vocab, normalize_rows(raw), cfg.provider)
