"""Semantic queries embedded from class names, and learnable instance queries.

The text embedder is pluggable and frozen: it never trains. The default is
a hashed character-trigram bag projected through a fixed random matrix, so
the package has no external language-model dependency while keeping the
property that different names map to different prototype vectors. Real
sentence encoders can register under a new key behind the same interface.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch
from torch import Tensor, nn


class TextEmbedder:
    """Interface: deterministic name -> vector, frozen during training."""

    embed_dim: int

    def embed(self, name: str) -> np.ndarray:
        raise NotImplementedError


class TrigramHashEmbedder(TextEmbedder):
    """Hashed character-trigram bag, projected to embed_dim and normalized.

    Trigrams are drawn from the name padded with one space on each side, so
    whitespace differences produce distinct vectors. Hashing uses crc32 and
    the projection matrix comes from a fixed seed, making the embedding a
    pure function of the string across processes and platforms.
    """

    def __init__(self, embed_dim: int = 384, buckets: int = 4096, seed: int = 271_828):
        self.embed_dim = embed_dim
        self.buckets = buckets
        rng = np.random.default_rng(seed)
        self._projection = rng.standard_normal((buckets, embed_dim)).astype(np.float32)
        self._projection /= np.sqrt(buckets)

    def embed(self, name: str) -> np.ndarray:
        padded = f" {name} "
        counts = np.zeros(self.buckets, dtype=np.float32)
        for i in range(len(padded) - 2):
            trigram = padded[i : i + 3]
            counts[zlib.crc32(trigram.encode("utf-8")) % self.buckets] += 1.0
        vec = counts @ self._projection
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec = vec / norm
        return vec.astype(np.float32)


_EMBEDDERS: dict[str, type[TextEmbedder]] = {}


def register_embedder(key: str):
    def deco(cls):
        _EMBEDDERS[key] = cls
        return cls

    return deco


register_embedder("trigram-hash")(TrigramHashEmbedder)


def get_embedder(key: str, **kwargs) -> TextEmbedder:
    if key not in _EMBEDDERS:
        raise KeyError(f"unknown embedder '{key}'; registered: {sorted(_EMBEDDERS)}")
    return _EMBEDDERS[key](**kwargs)


class SemanticQueryEmbedder(nn.Module):
    """Maps class names to semantic queries via a learnable projection.

    Only the embed_dim -> C projection trains; the underlying text embedder
    stays frozen, so re-embedding a name after any number of steps yields a
    bit-identical raw vector.
    """

    def __init__(self, channels: int, embedder: TextEmbedder | None = None):
        super().__init__()
        self.embedder = embedder if embedder is not None else TrigramHashEmbedder()
        self.project = nn.Linear(self.embedder.embed_dim, channels)
        self._cache: dict[str, Tensor] = {}

    def raw_embeddings(self, names: list[str]) -> Tensor:
        rows = []
        for name in names:
            if name not in self._cache:
                self._cache[name] = torch.from_numpy(self.embedder.embed(name))
            rows.append(self._cache[name])
        return torch.stack(rows)

    def forward(self, names: list[str]) -> Tensor:
        if len(names) == 0:
            raise ValueError("class name list is empty")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names would collide as prototypes: {names}")
        raw = self.raw_embeddings(names).to(self.project.weight.dtype)
        return self.project(raw)


def embed_class_names(names: list[str], embedder: SemanticQueryEmbedder) -> Tensor:
    """Semantic queries (M, C) in input order."""
    return embedder(list(names))


def init_instance_queries(n: int, channels: int, seed: int) -> Tensor:
    """Zero-mean normal initialization with sigma = 0.02, per seed."""
    if n < 1:
        raise ValueError("need at least one instance query")
    g = torch.Generator().manual_seed(seed)
    return 0.02 * torch.randn(n, channels, generator=g)
