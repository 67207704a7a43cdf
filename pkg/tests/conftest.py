"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from fedtext import features
from fedtext.corpus import ClientShard, Label
from fedtext.model import ExampleSet


def random_sparse_vector(dim: int, nnz: int, rng: np.random.Generator) -> features.SparseVector:
    idx = np.sort(rng.choice(dim, size=min(nnz, dim), replace=False)).astype(np.int64)
    vals = rng.normal(size=len(idx))
    norm = np.linalg.norm(vals)
    if norm > 0:
        vals = vals / norm
    return features.SparseVector(dim, idx, vals)


def make_examples(n: int, dim: int, seed: int = 0, nnz: int = 6) -> ExampleSet:
    rng = np.random.default_rng(seed)
    vectors = [random_sparse_vector(dim, nnz, rng) for _ in range(n)]
    y = rng.integers(0, 2, size=n).astype(np.float64)
    return ExampleSet(features.stack(vectors, dim), y, tuple(f"u{i:03d}" for i in range(n)))


def make_shards(n_clients: int, dim: int, seed: int = 0, nnz: int = 6) -> list[ClientShard]:
    rng = np.random.default_rng(seed)
    shards = []
    for i in range(n_clients):
        vec = random_sparse_vector(dim, nnz, rng)
        label = Label.TREATMENT if rng.random() < 0.5 else Label.CONTROL
        shards.append(ClientShard(f"u{i:03d}", vec, label))
    return shards
