"""Binary logistic regression trained with mini-batch SGD.

Parameters are a dense weight vector plus a bias; internally they travel
as one concatenated array (bias last) so federated aggregation and DP
clipping treat the bias like any other coordinate. The loss optionally
carries a ridge term (weights only) and a FedProx proximal term
(weights + bias) anchored at a reference parameter vector.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse
from scipy.special import expit

from .features import SparseVector


class DimensionMismatch(ValueError):
    pass


@dataclass
class ParameterVector:
    weights: np.ndarray
    bias: float

    @property
    def dim(self) -> int:
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        """Concatenated [weights..., bias] representation."""
        return np.concatenate([self.weights, [self.bias]])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ParameterVector":
        return cls(weights=np.array(arr[:-1], dtype=np.float64), bias=float(arr[-1]))

    @classmethod
    def zeros(cls, dim: int) -> "ParameterVector":
        return cls(weights=np.zeros(dim), bias=0.0)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.weights.copy(), self.bias)


@dataclass(frozen=True)
class TrainConfig:
    """Local training hyperparameters."""

    lr: float = 4e-5
    epochs: int = 50
    early_stop_patience: int = 5
    batch_size: int = 32
    l2: float = 0.0
    prox_mu: float = 0.0
    optimizer: str = "sgd"  # "sgd" | "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.l2 < 0 or self.prox_mu < 0:
            raise ValueError("l2 and prox_mu must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ExampleSet:
    """Vectorized examples: CSR design matrix, 0/1 labels, user ids."""

    X: sparse.csr_matrix
    y: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.X.shape[0] != len(self.y) or len(self.y) != len(self.ids):
            raise ValueError("X, y, ids must agree in length")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx: np.ndarray) -> "ExampleSet":
        return ExampleSet(self.X[idx], self.y[idx], tuple(self.ids[i] for i in idx))


@dataclass
class LocalStats:
    epochs_run: int
    final_loss: float
    best_loss: float
    n_examples: int


def predict_proba(w: ParameterVector, x: SparseVector) -> float:
    """P(treatment | x) = sigmoid(w.x + b); decision threshold is 0.5."""
    if x.dim != w.dim:
        raise DimensionMismatch(f"vector dim {x.dim} != model dim {w.dim}")
    return float(expit(w.weights[x.indices] @ x.values + w.bias))


def predict_proba_batch(w: ParameterVector, X: sparse.csr_matrix) -> np.ndarray:
    if X.shape[1] != w.dim:
        raise DimensionMismatch(f"matrix dim {X.shape[1]} != model dim {w.dim}")
    return expit(X @ w.weights + w.bias)


def data_loss(w: ParameterVector, batch: ExampleSet) -> float:
    """Mean binary cross-entropy, computed in the stable logit form."""
    z = batch.X @ w.weights + w.bias
    return float(np.mean(np.logaddexp(0.0, z) - batch.y * z))


def loss(
    w: ParameterVector,
    batch: ExampleSet,
    w_ref: ParameterVector | None = None,
    mu: float = 0.0,
    l2: float = 0.0,
) -> float:
    """BCE + (l2/2)||weights||^2 + (mu/2)||w - w_ref||^2.

    The ridge term excludes the bias; the proximal term includes it.
    """
    total = data_loss(w, batch)
    if l2 > 0:
        total += 0.5 * l2 * float(w.weights @ w.weights)
    if mu > 0:
        if w_ref is None:
            raise ValueError("mu > 0 requires w_ref")
        dw = w.weights - w_ref.weights
        db = w.bias - w_ref.bias
        total += 0.5 * mu * (float(dw @ dw) + db * db)
    return total


def gradient(
    w: ParameterVector,
    batch: ExampleSet,
    w_ref: ParameterVector | None = None,
    mu: float = 0.0,
    l2: float = 0.0,
) -> ParameterVector:
    """Exact analytic gradient of loss()."""
    n = len(batch)
    r = predict_proba_batch(w, batch.X) - batch.y
    g_w = np.asarray(batch.X.T @ r) / n
    g_b = float(np.sum(r)) / n
    if l2 > 0:
        g_w = g_w + l2 * w.weights
    if mu > 0:
        if w_ref is None:
            raise ValueError("mu > 0 requires w_ref")
        g_w = g_w + mu * (w.weights - w_ref.weights)
        g_b = g_b + mu * (w.bias - w_ref.bias)
    return ParameterVector(g_w, g_b)


def train_local(
    w_init: ParameterVector,
    train: ExampleSet,
    cfg: TrainConfig,
    val: ExampleSet | None = None,
) -> tuple[ParameterVector, LocalStats]:
    """Mini-batch SGD (or Adam) from w_init over seeded shuffles.

    The proximal reference is w_init itself, matching the federated
    broadcast semantics. With a validation set, training early-stops after
    early_stop_patience epochs without val-loss (BCE) improvement
    (patience 0 disables) and the best-val checkpoint is returned;
    otherwise the final iterate is.
    """
    if len(train) < 1:
        raise ValueError("train set must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    w_ref = w_init.copy() if cfg.prox_mu > 0 else None
    arr = w_init.as_array()
    n = len(train)

    adam_m = np.zeros_like(arr) if cfg.optimizer == "adam" else None
    adam_v = np.zeros_like(arr) if cfg.optimizer == "adam" else None
    adam_t = 0

    best_arr = arr.copy()
    best_loss = np.inf
    epochs_since_best = 0
    epochs_run = 0
    current = ParameterVector.from_array(arr)

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if start == 0 and cfg.batch_size >= n:
                batch = train  # full-batch step; skip the reindex
            else:
                batch = train.subset(order[start : start + cfg.batch_size])
            g = gradient(current, batch, w_ref, cfg.prox_mu, cfg.l2).as_array()
            if cfg.optimizer == "adam":
                adam_t += 1
                adam_m = cfg.adam_beta1 * adam_m + (1 - cfg.adam_beta1) * g
                adam_v = cfg.adam_beta2 * adam_v + (1 - cfg.adam_beta2) * g * g
                m_hat = adam_m / (1 - cfg.adam_beta1**adam_t)
                v_hat = adam_v / (1 - cfg.adam_beta2**adam_t)
                arr = arr - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            else:
                arr = arr - cfg.lr * g
            current = ParameterVector.from_array(arr)
        epochs_run += 1
        if val is not None:
            vloss = data_loss(current, val)
            if vloss < best_loss:
                best_loss = vloss
                best_arr = arr.copy()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= cfg.early_stop_patience > 0:
                    break

    if val is not None:
        final = ParameterVector.from_array(best_arr)
        final_loss = data_loss(final, train)
        stats = LocalStats(epochs_run, final_loss, best_loss, n)
    else:
        final = current
        final_loss = data_loss(final, train)
        stats = LocalStats(epochs_run, final_loss, final_loss, n)
    return final, stats


def make_config(**overrides) -> TrainConfig:
    """TrainConfig with defaults, overriding selected fields."""
    return replace(TrainConfig(), **overrides)
