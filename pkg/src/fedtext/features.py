"""Hashing vectorizer with an invertible token registry.

Tokens are hashed into a fixed number of buckets with a keyed 64-bit
hash, so client shards can be vectorized without a shared vocabulary.
The registry (bucket -> observed tokens) is populated once at fit time
and restores interpretability for the attribution reports; buckets with
more than one token are reported as collisions.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

SCHEMA_VERSION = 1

# Keyed hash so bucket assignment is stable across runs, platforms, and
# process restarts (unlike Python's salted hash()).
_HASH_KEY = b"fedtext-bucket-v1"


def token_bucket(token: str, dim: int) -> int:
    """Stable bucket index for a token."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=_HASH_KEY).digest()
    return int.from_bytes(digest, "little") % dim


@dataclass(frozen=True, eq=False)
class SparseVector:
    """Sparse feature vector: strictly increasing indices, implicit zeros."""

    dim: int
    indices: np.ndarray  # int64, strictly increasing
    values: np.ndarray  # float64, finite

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def __post_init__(self) -> None:
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values must have equal length")
        if len(self.indices) > 0:
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise ValueError("index out of range")
            if np.any(np.diff(self.indices) <= 0):
                raise ValueError("indices must be strictly increasing")
            if not np.all(np.isfinite(self.values)):
                raise ValueError("values must be finite")

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


@dataclass
class FeatureSpace:
    """Fitted hashing space: dimension, weighting mode, and token registry."""

    dim: int = 2**15
    mode: str = "tf"  # "tf" | "tfidf"
    idf: np.ndarray | None = None
    token_registry: dict[int, set[str]] = field(default_factory=dict)
    _bucket_cache: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.dim < 2 or self.dim & (self.dim - 1) != 0:
            raise ValueError("dim must be a power of two >= 2")
        if self.mode not in ("tf", "tfidf"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if (self.idf is not None) != (self.mode == "tfidf"):
            raise ValueError("idf present iff mode is 'tfidf'")

    def bucket(self, token: str) -> int:
        b = self._bucket_cache.get(token)
        if b is None:
            b = token_bucket(token, self.dim)
            self._bucket_cache[token] = b
        return b

    def collisions(self) -> dict[int, set[str]]:
        """Registry buckets shared by more than one observed token."""
        return {i: toks for i, toks in self.token_registry.items() if len(toks) > 1}

    def tokens_for(self, index: int) -> set[str]:
        return set(self.token_registry.get(index, set()))

    def save(self, path: str | Path) -> None:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "dim": self.dim,
            "mode": self.mode,
            "idf": None if self.idf is None else self.idf.tolist(),
            "token_registry": {str(i): sorted(toks) for i, toks in sorted(self.token_registry.items())},
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSpace":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported feature-space schema: {payload.get('schema_version')}")
        idf = payload["idf"]
        return cls(
            dim=payload["dim"],
            mode=payload["mode"],
            idf=None if idf is None else np.asarray(idf, dtype=np.float64),
            token_registry={int(i): set(toks) for i, toks in payload["token_registry"].items()},
        )


def fit(corpus: list[str], dim: int = 2**15, mode: str = "tf") -> FeatureSpace:
    """Fit a FeatureSpace on cleaned user texts.

    Document frequencies are counted per bucket; idf_i = ln((1+N)/(1+df_i)) + 1
    in tfidf mode. The registry records every token observed in the corpus.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    space = FeatureSpace(dim=dim, mode="tf")  # idf attached below if needed
    registry: dict[int, set[str]] = {}
    df = np.zeros(dim, dtype=np.int64)
    for text in corpus:
        buckets = set()
        for token in text.split():
            b = space.bucket(token)
            registry.setdefault(b, set()).add(token)
            buckets.add(b)
        for b in buckets:
            df[b] += 1
    space.token_registry = registry
    if mode == "tfidf":
        n_docs = len(corpus)
        idf = np.log((1.0 + n_docs) / (1.0 + df)) + 1.0
        space.mode = "tfidf"
        space.idf = idf
    return space


def vectorize(text: str, space: FeatureSpace) -> SparseVector:
    """Map cleaned text to an L2-normalized sparse vector.

    Term counts per bucket, multiplied by idf in tfidf mode, then
    normalized; the zero vector stays zero.
    """
    counts: dict[int, float] = {}
    for token in text.split():
        b = space.bucket(token)
        counts[b] = counts.get(b, 0.0) + 1.0
    if not counts:
        return SparseVector(space.dim, np.empty(0, dtype=np.int64), np.empty(0))
    indices = np.array(sorted(counts), dtype=np.int64)
    values = np.array([counts[i] for i in indices], dtype=np.float64)
    if space.mode == "tfidf":
        values = values * space.idf[indices]
    norm = np.linalg.norm(values)
    if norm > 0:
        values = values / norm
    return SparseVector(space.dim, indices, values)


def stack(vectors: list[SparseVector], dim: int) -> sparse.csr_matrix:
    """Stack sparse vectors into a CSR design matrix."""
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        if v.dim != dim:
            raise ValueError(f"vector dim {v.dim} != {dim}")
        indptr[i + 1] = indptr[i] + v.nnz
    indices = (
        np.concatenate([v.indices for v in vectors]) if vectors else np.empty(0, dtype=np.int64)
    )
    data = np.concatenate([v.values for v in vectors]) if vectors else np.empty(0)
    return sparse.csr_matrix((data, indices, indptr), shape=(len(vectors), dim))


def mean_dense(matrix: sparse.csr_matrix) -> np.ndarray:
    """Column means of a CSR matrix as a dense vector."""
    return np.asarray(matrix.mean(axis=0)).ravel()
