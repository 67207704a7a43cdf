"""Federated orchestration: client sampling, aggregation, server rounds.

One round samples a client fraction, trains each sampled client locally
from the broadcast global model, optionally privatizes the resulting
deltas, aggregates them (example-count weighted, or uniform in DP mode),
and applies the server step. Per-client RNG streams are keyed by
(master seed, round, client id) so trajectories are independent of
registration and scheduling order; aggregation consumes updates in
client_id order so floating-point summation is deterministic too.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis, features, model, privacy
from .corpus import ClientShard, Label
from .model import DimensionMismatch, ExampleSet, ParameterVector, TrainConfig
from .seeding import derive_rng, derive_seed


@dataclass(frozen=True)
class FedConfig:
    """Federated run parameters."""

    rounds: int = 100
    local: TrainConfig = field(default_factory=TrainConfig)
    client_fraction: float = 0.1
    aggregator: str = "fedavg"  # "fedavg" | "fedprox" | "fedopt"
    prox_mu: float = 0.01
    server_opt: str = "sgd"  # "sgd" | "adam" (fedopt only)
    server_lr: float = 1e-3
    server_beta1: float = 0.9
    server_beta2: float = 0.99
    server_tau: float = 1e-3
    patience: int = 5  # global early stop on val loss; 0 disables
    seed: int = 0
    record_parameters: bool = False  # keep per-round global params in memory

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not (0.0 < self.client_fraction <= 1.0):
            raise ValueError("client_fraction must be in (0, 1]")
        if self.aggregator not in ("fedavg", "fedprox", "fedopt"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.server_opt not in ("sgd", "adam"):
            raise ValueError(f"unknown server optimizer {self.server_opt!r}")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")


@dataclass
class ClientUpdate:
    """A client's parameter delta (w_local - w_global) with its weight."""

    client_id: str
    delta: np.ndarray  # concatenated [weights..., bias]
    n_k: int
    clipped: bool = False
    noised: bool = False


@dataclass
class RoundRecord:
    round_index: int
    sampled: tuple[str, ...]
    aggregate_norm: float
    val_loss: float
    val_macro_f1: float
    sigma: float | None = None
    wall_clock: float = 0.0  # serialized separately from the metrics records
    parameters: np.ndarray | None = None  # only when record_parameters

    def to_record(self) -> dict:
        rec = {
            "round": self.round_index,
            "sampled": list(self.sampled),
            "aggregate_norm": self.aggregate_norm,
            "val_loss": self.val_loss,
            "val_macro_f1": self.val_macro_f1,
        }
        if self.sigma is not None:
            rec["sigma"] = self.sigma
        return rec


@dataclass
class TrainingHistory:
    rounds: list[RoundRecord]
    final: ParameterVector
    stop_reason: str  # "completed" | "early_stop" | "budget_exhausted"
    test_report: analysis.MetricsReport | None = None
    ledger: privacy.PrivacyLedger | None = None


def sample_clients(all_ids, c: float, rng: np.random.Generator) -> list[str]:
    """Uniform sample without replacement of max(1, round(c*N)) clients.

    round() is Python's round-half-to-even; the result is returned in
    client_id order.
    """
    ids = sorted(all_ids)
    if not ids:
        raise ValueError("no registered clients")
    size = max(1, round(c * len(ids)))
    chosen = rng.choice(len(ids), size=size, replace=False)
    return sorted(ids[i] for i in chosen)


def aggregate_weighted(updates: list[ClientUpdate]) -> np.ndarray:
    """Example-count weighted average of deltas, in client_id order.

    Privatized updates carry n_k = 1, so DP-mode aggregation reduces to
    the plain arithmetic mean.
    """
    if not updates:
        raise ValueError("need at least one update")
    updates = sorted(updates, key=lambda u: u.client_id)
    dim = len(updates[0].delta)
    if any(len(u.delta) != dim for u in updates):
        raise DimensionMismatch("client updates disagree in dimension")
    total = float(sum(u.n_k for u in updates))
    agg = np.zeros(dim)
    for u in updates:
        agg += (u.n_k / total) * u.delta
    return agg


@dataclass
class ServerState:
    w: np.ndarray  # concatenated [weights..., bias]
    m: np.ndarray | None = None  # Adam first moment
    v: np.ndarray | None = None  # Adam second moment
    t: int = 0

    @classmethod
    def init(cls, dim: int) -> "ServerState":
        return cls(w=np.zeros(dim + 1))


def server_step(state: ServerState, aggregate_delta: np.ndarray, cfg: FedConfig) -> ServerState:
    """Apply one server update in place and return the state.

    FedAvg/FedProx add the aggregate delta directly. FedOpt treats
    g = -delta as a pseudo-gradient for the server optimizer; the Adam
    variant keeps moments across rounds, uses bias correction, and adds
    the adaptivity floor tau to sqrt(v_hat).
    """
    if cfg.aggregator in ("fedavg", "fedprox"):
        state.w = state.w + aggregate_delta
        return state
    g = -aggregate_delta
    if cfg.server_opt == "sgd":
        state.w = state.w - cfg.server_lr * g
        return state
    if state.m is None:
        state.m = np.zeros_like(state.w)
        state.v = np.zeros_like(state.w)
    state.t += 1
    state.m = cfg.server_beta1 * state.m + (1 - cfg.server_beta1) * g
    state.v = cfg.server_beta2 * state.v + (1 - cfg.server_beta2) * g * g
    m_hat = state.m / (1 - cfg.server_beta1**state.t)
    v_hat = state.v / (1 - cfg.server_beta2**state.t)
    state.w = state.w - cfg.server_lr * m_hat / (np.sqrt(v_hat) + cfg.server_tau)
    return state


def shard_example_set(shard: ClientShard) -> ExampleSet:
    return ExampleSet(
        X=features.stack([shard.x], shard.x.dim),
        y=np.array([1.0 if shard.label is Label.TREATMENT else 0.0]),
        ids=(shard.client_id,),
    )


def run_federated(
    shards: list[ClientShard],
    cfg: FedConfig,
    val: ExampleSet,
    test: ExampleSet | None = None,
    privacy_spec: privacy.PrivacySpec | None = None,
) -> TrainingHistory:
    """Run federated rounds until completion, early stop, or budget end.

    FedProx broadcasts the global model as the proximal reference; the
    privacy hook clips and noises every update before aggregation and
    records the round in the ledger first, so exhaustion stops training
    before any further spend.
    """
    if not shards:
        raise ValueError("need at least one client shard")
    client_sets = {s.client_id: shard_example_set(s) for s in shards}
    counts = {s.client_id: s.n_examples for s in shards}
    ids = sorted(client_sets)
    dim = shards[0].x.dim

    state = ServerState.init(dim)
    ledger = privacy.PrivacyLedger() if privacy_spec is not None else None
    mu = cfg.prox_mu if cfg.aggregator == "fedprox" else 0.0

    records: list[RoundRecord] = []
    best_val = np.inf
    best_w = state.w.copy()
    rounds_since_best = 0
    stop_reason = "completed"

    for t in range(1, cfg.rounds + 1):
        started = time.perf_counter()
        sigma_t = None
        if privacy_spec is not None:
            try:
                privacy.record_round(ledger, t, privacy_spec)
                sigma_t = ledger.entries[-1].sigma
            except privacy.BudgetExhausted:
                stop_reason = "budget_exhausted"
                break

        sampled = sample_clients(ids, cfg.client_fraction, derive_rng(cfg.seed, t, "sample"))
        w_global = ParameterVector.from_array(state.w)
        updates = []
        for cid in sampled:
            local_cfg = replace(
                cfg.local, prox_mu=mu, seed=derive_seed(cfg.seed, t, cid, "local")
            )
            w_local, _ = model.train_local(w_global, client_sets[cid], local_cfg)
            update = ClientUpdate(cid, w_local.as_array() - state.w, counts[cid])
            if privacy_spec is not None:
                update = privacy.privatize(
                    update, privacy_spec, t, derive_rng(cfg.seed, t, cid, "noise")
                )
            updates.append(update)

        agg = aggregate_weighted(updates)
        state = server_step(state, agg, cfg)

        w_now = ParameterVector.from_array(state.w)
        val_loss = model.data_loss(w_now, val)
        val_f1 = analysis.evaluate(w_now, val).macro_f1
        records.append(
            RoundRecord(
                round_index=t,
                sampled=tuple(sampled),
                aggregate_norm=float(np.linalg.norm(agg)),
                val_loss=val_loss,
                val_macro_f1=val_f1,
                sigma=sigma_t,
                wall_clock=time.perf_counter() - started,
                parameters=state.w.copy() if cfg.record_parameters else None,
            )
        )

        if val_loss < best_val:
            best_val = val_loss
            best_w = state.w.copy()
            rounds_since_best = 0
        else:
            rounds_since_best += 1
            if cfg.patience > 0 and rounds_since_best >= cfg.patience:
                stop_reason = "early_stop"
                break

    final = ParameterVector.from_array(best_w if cfg.patience > 0 else state.w)
    history = TrainingHistory(records, final, stop_reason, ledger=ledger)
    if test is not None:
        history.test_report = analysis.evaluate(final, test)
    return history


def run_centralized(
    train: ExampleSet,
    val: ExampleSet | None,
    test: ExampleSet,
    cfg: TrainConfig,
) -> tuple[ParameterVector, analysis.MetricsReport]:
    """Pooled baseline: local trainer on all data, early stop on val."""
    if len(train) == 0:
        raise ValueError("train split must be non-empty")
    w, _ = model.train_local(ParameterVector.zeros(train.dim), train, cfg, val)
    return w, analysis.evaluate(w, test)
