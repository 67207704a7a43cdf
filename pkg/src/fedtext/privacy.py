"""Client-level differential privacy for federated updates.

Each sampled client's parameter delta is L2-clipped and perturbed with
i.i.d. Gaussian noise before transmission; the server-side ledger tracks
the accumulated (epsilon, delta) spend per round under basic sequential
composition with an even per-round split. Ledger arithmetic uses exact
rationals so the budget boundary is reached without floating-point drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np


class BudgetExhausted(RuntimeError):
    """Recording the round would push cumulative epsilon past the total."""


class CalibrationOutOfRange(ValueError):
    """Classical Gaussian-mechanism bound requested outside its validity."""


@dataclass(frozen=True)
class PrivacySpec:
    """Privacy budget, clipping bound, and noise-calibration choices."""

    epsilon_total: float
    rounds: int
    delta: float = 1e-5
    clip_norm: float = 1.0
    schedule: str = "constant"  # "constant" | "sqrt_decay"
    sensitivity: str = "add_remove"  # "add_remove" (C) | "replace" (2C)
    calibration: str = "classical"  # "classical" | "analytic"

    def __post_init__(self) -> None:
        if self.epsilon_total <= 0:
            raise ValueError("epsilon_total must be > 0")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must be in (0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.schedule not in ("constant", "sqrt_decay"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.sensitivity not in ("add_remove", "replace"):
            raise ValueError(f"unknown sensitivity convention {self.sensitivity!r}")
        if self.calibration not in ("classical", "analytic"):
            raise ValueError(f"unknown calibration {self.calibration!r}")

    @property
    def epsilon_round(self) -> Fraction:
        """Exact per-round epsilon under even sequential composition."""
        return Fraction(self.epsilon_total) / self.rounds

    @property
    def delta_round(self) -> Fraction:
        return Fraction(self.delta) / self.rounds

    @property
    def l2_sensitivity(self) -> float:
        return self.clip_norm if self.sensitivity == "add_remove" else 2.0 * self.clip_norm


def clip_update(delta: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale delta to L2 norm at most clip_norm: delta * min(1, C/||delta||)."""
    norm = float(np.linalg.norm(delta))
    if norm <= clip_norm or norm == 0.0:
        return delta.copy()
    return delta * (clip_norm / norm)


def classical_sigma(sensitivity: float, epsilon: float, delta: float) -> float:
    """Closed-form Gaussian-mechanism noise scale.

    sigma = sensitivity * sqrt(2 ln(1.25/delta)) / epsilon. The bound this
    derives from holds for epsilon < 1; callers wanting epsilon >= 1 must
    use the analytic calibration.
    """
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def analytic_gaussian_delta(sensitivity: float, epsilon: float, sigma: float) -> float:
    """Exact delta achieved by a Gaussian mechanism at (epsilon, sigma).

    delta = Phi(s/(2 sigma) - eps sigma/s) - e^eps Phi(-s/(2 sigma) - eps sigma/s),
    with Phi the standard normal CDF. Accurate for the moderate epsilon
    values used in per-round budgets; extreme epsilon underflows the
    second term, which only makes the result conservative.
    """
    a = sensitivity / (2.0 * sigma)
    b = epsilon * sigma / sensitivity
    phi = lambda x: 0.5 * math.erfc(-x / math.sqrt(2.0))
    return phi(a - b) - math.exp(epsilon) * phi(-a - b)


def analytic_sigma(sensitivity: float, epsilon: float, delta: float) -> float:
    """Numerically inverted analytic-Gaussian noise scale.

    Bisects the exact (epsilon, delta) characterization, which stays valid
    for epsilon >= 1 where the classical closed form does not apply.
    """
    lo, hi = 1e-10, 1.0
    while analytic_gaussian_delta(sensitivity, epsilon, hi) > delta:
        hi *= 2.0
        if hi > 1e12:
            raise CalibrationOutOfRange("analytic calibration failed to bracket sigma")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if analytic_gaussian_delta(sensitivity, epsilon, mid) > delta:
            lo = mid
        else:
            hi = mid
    return hi


def schedule_scale(schedule: str, t: int) -> float:
    if schedule == "constant":
        return 1.0
    return 1.0 / math.sqrt(t)


def calibrate_sigma(spec: PrivacySpec, t: int) -> float:
    """Noise scale for round t under the even per-round budget.

    Base sigma comes from the classical closed form (requires per-round
    epsilon < 1) or the inverted analytic characterization; the schedule
    then scales it by s(t) (constant 1, or 1/sqrt(t) decay).
    """
    if not (1 <= t <= spec.rounds):
        raise ValueError(f"round {t} outside 1..{spec.rounds}")
    eps_r = float(spec.epsilon_round)
    delta_r = float(spec.delta_round)
    if spec.calibration == "classical":
        if eps_r >= 1.0:
            raise CalibrationOutOfRange(
                f"classical Gaussian bound needs per-round epsilon < 1, got {eps_r:.6g}; "
                "raise rounds, lower epsilon_total, or use calibration='analytic'"
            )
        base = classical_sigma(spec.l2_sensitivity, eps_r, delta_r)
    else:
        base = analytic_sigma(spec.l2_sensitivity, eps_r, delta_r)
    return base * schedule_scale(spec.schedule, t)


@dataclass(frozen=True)
class LedgerEntry:
    round_index: int
    epsilon: float
    delta: float
    sigma: float


@dataclass
class PrivacyLedger:
    """Append-only per-round privacy spend with exact cumulative sums."""

    entries: list[LedgerEntry] = field(default_factory=list)
    _eps_spent: Fraction = Fraction(0)
    _delta_spent: Fraction = Fraction(0)

    @property
    def epsilon_spent(self) -> float:
        return float(self._eps_spent)

    @property
    def delta_spent(self) -> float:
        return float(self._delta_spent)


def record_round(ledger: PrivacyLedger, t: int, spec: PrivacySpec) -> PrivacyLedger:
    """Record round t's spend; raises BudgetExhausted past the total.

    Spending exactly the full budget at round T is allowed; round T+1 is
    not. Each round may be recorded once.
    """
    if any(e.round_index == t for e in ledger.entries):
        raise ValueError(f"round {t} already recorded")
    eps_r = spec.epsilon_round
    delta_r = spec.delta_round
    if ledger._eps_spent + eps_r > Fraction(spec.epsilon_total):
        raise BudgetExhausted(
            f"round {t}: cumulative epsilon {float(ledger._eps_spent + eps_r):.6g} "
            f"would exceed budget {spec.epsilon_total:.6g}"
        )
    sigma_t = calibrate_sigma(spec, t)
    ledger.entries.append(LedgerEntry(t, float(eps_r), float(delta_r), sigma_t))
    ledger._eps_spent += eps_r
    ledger._delta_spent += delta_r
    return ledger


def privatize(update, spec: PrivacySpec, t: int, rng: np.random.Generator,
              sigma_override: float | None = None):
    """Clip a client update and add per-coordinate Gaussian noise.

    Returns a new update with flags set and n_k forced to 1: DP-mode
    aggregation must be uniform, since example-count weighting would leak
    counts and break the sensitivity bound. sigma_override is a testing
    hook; 0.0 reduces privatize to pure clipping.
    """
    sigma_t = calibrate_sigma(spec, t) if sigma_override is None else sigma_override
    delta = clip_update(update.delta, spec.clip_norm)
    if sigma_t > 0:
        delta = delta + rng.normal(0.0, sigma_t, size=delta.shape)
    return replace(update, delta=delta, n_k=1, clipped=True, noised=True)
