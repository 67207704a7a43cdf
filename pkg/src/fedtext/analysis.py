"""Evaluation, statistical comparison, and feature-attribution audits.

Metrics are macro-averaged over the two classes with the usual 0-for-
undefined convention, which makes degenerate single-class predictors land
on closed-form scores. The Wilcoxon signed-rank test is exact (full sign
enumeration via the rank-sum distribution). SHAP values for the linear
logit are computed with the exact independent-features formula.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import model, wordlists
from .features import FeatureSpace, SparseVector
from .model import ExampleSet, ParameterVector

POSITIVE_CLASS = "treatment"
NEGATIVE_CLASS = "control"


class TooLarge(ValueError):
    """Exact Wilcoxon enumeration is limited to 20 effective pairs."""


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass(frozen=True)
class MetricsReport:
    macro_f1: float
    macro_recall: float
    per_class: dict[str, ClassScores]
    n_examples: int

    def to_record(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "macro_recall": self.macro_recall,
            "n_examples": self.n_examples,
            "per_class": {
                name: {
                    "precision": s.precision, "recall": s.recall, "f1": s.f1,
                    "tp": s.tp, "fp": s.fp, "tn": s.tn, "fn": s.fn,
                }
                for name, s in sorted(self.per_class.items())
            },
        }


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def metrics_from_predictions(y_true: np.ndarray, y_pred: np.ndarray) -> MetricsReport:
    """Macro F1/recall and per-class scores from 0/1 label arrays.

    A class never predicted gets precision = F1 = 0 by convention.
    """
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred must have equal length")
    per_class: dict[str, ClassScores] = {}
    for name, positive in ((POSITIVE_CLASS, 1), (NEGATIVE_CLASS, 0)):
        t = y_true == positive
        p = y_pred == positive
        tp = int(np.sum(t & p))
        fp = int(np.sum(~t & p))
        fn = int(np.sum(t & ~p))
        tn = int(np.sum(~t & ~p))
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        per_class[name] = ClassScores(precision, recall, f1, tp, fp, tn, fn)
    macro_f1 = float(np.mean([s.f1 for s in per_class.values()]))
    macro_recall = float(np.mean([s.recall for s in per_class.values()]))
    return MetricsReport(macro_f1, macro_recall, per_class, len(y_true))


def evaluate(w: ParameterVector, examples: ExampleSet) -> MetricsReport:
    """Threshold-0.5 predictions of a model on an example set."""
    if len(examples) == 0:
        raise ValueError("cannot evaluate on an empty split")
    proba = model.predict_proba_batch(w, examples.X)
    return metrics_from_predictions(examples.y, (proba >= 0.5).astype(int))


# --------------------------------------------------------------------------
# Exact Wilcoxon signed-rank test
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonResult:
    statistic: float  # W = min(W+, W-)
    p_value: float
    n_effective: int

    @property
    def all_zero(self) -> bool:
        return self.n_effective == 0


def _midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their midrank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(a, b) -> ComparisonResult:
    """Exact two-sided Wilcoxon signed-rank test on paired scores.

    Zero differences are dropped; |differences| are midranked; the exact
    p-value enumerates all 2^n sign assignments of the rank sums. All-zero
    differences return W = 0, p = 1 by convention. n_effective > 20 raises
    TooLarge.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1-d arrays of equal length")
    if len(a) < 2:
        raise ValueError("need at least 2 pairs")
    d = a - b
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return ComparisonResult(statistic=0.0, p_value=1.0, n_effective=0)
    if n > 20:
        raise TooLarge(f"exact enumeration supports n <= 20, got {n}")

    ranks2 = np.rint(2.0 * _midranks(np.abs(d))).astype(np.int64)  # doubled: integers
    w_plus2 = int(ranks2[d > 0].sum())
    total2 = int(ranks2.sum())
    w_obs2 = min(w_plus2, total2 - w_plus2)

    # Distribution of the doubled positive rank sum over all sign vectors.
    counts = np.zeros(total2 + 1, dtype=np.int64)
    counts[0] = 1
    for r in ranks2:
        counts[r:] = counts[r:] + counts[:-r]
    sums = np.arange(total2 + 1)
    favorable = int(counts[np.minimum(sums, total2 - sums) <= w_obs2].sum())
    # Division by a power of two is exact in binary floating point.
    p = favorable / float(2**n)
    return ComparisonResult(statistic=w_obs2 / 2.0, p_value=p, n_effective=n)


# --------------------------------------------------------------------------
# Multi-seed stability
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityReport:
    mean: float
    sd: float  # sample SD (n-1)
    ci_low: float
    ci_high: float
    n: int

    def format(self) -> str:
        return f"{self.mean:.4f} ± {self.sd:.4f}"


def stability(reports: list[MetricsReport], seeds: list[int]) -> StabilityReport:
    """Mean, sample SD, and normal-approximation 95% CI of macro F1."""
    if len(reports) < 2:
        raise ValueError("stability needs at least 2 reports")
    if len(reports) != len(seeds):
        raise ValueError("reports and seeds must align")
    f1s = np.array([r.macro_f1 for r in reports])
    mean = float(f1s.mean())
    sd = float(f1s.std(ddof=1))
    half = 1.96 * sd / np.sqrt(len(f1s))
    return StabilityReport(mean, sd, mean - half, mean + half, len(f1s))


# --------------------------------------------------------------------------
# Exact linear SHAP and the lexicon audit
# --------------------------------------------------------------------------


def shap_linear(w: ParameterVector, x: SparseVector, background_mean: np.ndarray) -> np.ndarray:
    """Exact per-feature attribution for the linear logit.

    phi_j = w_j * (x_j - background_mean_j); the attributions sum to
    f(x) - f(background) exactly (the bias cancels).
    """
    if x.dim != w.dim or len(background_mean) != w.dim:
        raise model.DimensionMismatch("model, instance, and background dims must agree")
    phi = w.weights * (-background_mean)
    phi[x.indices] = w.weights[x.indices] * (x.values - background_mean[x.indices])
    return phi


@dataclass(frozen=True)
class FeatureAttribution:
    index: int
    tokens: tuple[str, ...]
    mean_abs_shap: float
    categories: tuple[str, ...]


@dataclass(frozen=True)
class AttributionReport:
    entries: tuple[FeatureAttribution, ...]
    category_histogram: dict[str, int]
    k: int
    background: str  # which split the background mean came from

    def tokens(self) -> set[str]:
        return {t for e in self.entries for t in e.tokens}

    def to_record(self) -> dict:
        return {
            "k": self.k,
            "background": self.background,
            "category_histogram": dict(sorted(self.category_histogram.items())),
            "features": [
                {
                    "index": e.index,
                    "tokens": list(e.tokens),
                    "mean_abs_shap": e.mean_abs_shap,
                    "categories": list(e.categories),
                }
                for e in self.entries
            ],
        }


@dataclass
class Lexicon:
    """Token -> category lookup: lowercase-exact, then prefix wildcards.

    Wildcard entries end in '*'; a token with no match falls back to the
    'generic' category.
    """

    exact: dict[str, frozenset[str]] = field(default_factory=dict)
    wildcards: tuple[tuple[str, frozenset[str]], ...] = ()

    CATEGORIES = (
        "health", "negemo", "affect", "social", "work", "religion",
        "percept", "motion", "space", "generic", "entertainment",
    )

    @classmethod
    def from_entries(cls, entries: dict[str, set[str]]) -> "Lexicon":
        exact: dict[str, frozenset[str]] = {}
        wild: list[tuple[str, frozenset[str]]] = []
        for word, cats in entries.items():
            unknown = set(cats) - set(cls.CATEGORIES)
            if unknown:
                raise ValueError(f"unknown lexicon categories {sorted(unknown)} for {word!r}")
            if word.endswith("*"):
                wild.append((word[:-1].lower(), frozenset(cats)))
            else:
                exact[word.lower()] = frozenset(cats)
        # Longest stems first so the most specific wildcard wins.
        wild.sort(key=lambda item: (-len(item[0]), item[0]))
        return cls(exact=exact, wildcards=tuple(wild))

    def categorize(self, token: str) -> frozenset[str]:
        token = token.lower()
        hit = self.exact.get(token)
        if hit is not None:
            return hit
        for stem, cats in self.wildcards:
            if token.startswith(stem):
                return cats
        return frozenset({"generic"})

    @classmethod
    def empty(cls) -> "Lexicon":
        return cls()

    @classmethod
    def default(cls) -> "Lexicon":
        """Bundled open lexicon over the category set.

        Health and negative-emotion stems are wildcards so numbered
        variants from the synthetic vocabulary stay categorized.
        """
        entries: dict[str, set[str]] = {}
        for word in wordlists.HEALTH:
            entries[word + "*"] = {"health"}
        for word in wordlists.NEGEMO:
            entries[word + "*"] = {"negemo"}
        for words, cat in (
            (wordlists.AFFECT, "affect"), (wordlists.SOCIAL, "social"),
            (wordlists.WORK, "work"), (wordlists.RELIGION, "religion"),
            (wordlists.PERCEPT, "percept"), (wordlists.MOTION, "motion"),
            (wordlists.SPACE, "space"), (wordlists.ENTERTAINMENT, "entertainment"),
            (wordlists.GENERIC, "generic"),
        ):
            for word in words:
                entries.setdefault(word, set()).add(cat)
        return cls.from_entries(entries)


def mean_abs_attribution(
    w: ParameterVector, X: sparse.csr_matrix, background_mean: np.ndarray
) -> np.ndarray:
    """mean_i |phi_j(x_i)| for every feature, computed sparsely.

    Equals |w_j| * mean_i |x_ij - bg_j|; zero entries contribute |bg_j|.
    """
    n, dim = X.shape
    xc = X.tocsc()
    contrib = np.zeros(dim)
    nnz_per_col = np.diff(xc.indptr)
    col_of_entry = np.repeat(np.arange(dim), nnz_per_col)
    np.add.at(contrib, col_of_entry, np.abs(xc.data - background_mean[col_of_entry]))
    contrib += (n - nnz_per_col) * np.abs(background_mean)
    return np.abs(w.weights) * contrib / n


def top_features(
    w: ParameterVector,
    examples: ExampleSet,
    space: FeatureSpace,
    lexicon: Lexicon,
    k: int = 50,
    background_mean: np.ndarray | None = None,
    background_name: str = "eval",
) -> AttributionReport:
    """Rank features by mean |SHAP| over a split and categorize their tokens.

    The background mean defaults to the evaluated split itself; pipelines
    pass the training-split mean. Ties break by ascending feature index;
    every token observed in a reported bucket is listed (collision
    transparency) and the category histogram covers the union of tokens.
    """
    if background_mean is None:
        background_mean = np.asarray(examples.X.mean(axis=0)).ravel()
        background_name = "eval"
    scores = mean_abs_attribution(w, examples.X, background_mean)
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    entries = []
    histogram: dict[str, int] = {}
    for idx in order:
        tokens = tuple(sorted(space.tokens_for(int(idx))))
        cats = sorted({c for tok in tokens for c in lexicon.categorize(tok)})
        entries.append(
            FeatureAttribution(int(idx), tokens, float(scores[idx]), tuple(cats))
        )
    for token in sorted({t for e in entries for t in e.tokens}):
        for cat in lexicon.categorize(token):
            histogram[cat] = histogram.get(cat, 0) + 1
    return AttributionReport(
        entries=tuple(entries),
        category_histogram=histogram,
        k=k,
        background=background_name,
    )
