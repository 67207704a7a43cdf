"""Config-driven experiment pipelines with reproducible artifacts.

A TOML config (plus an optional preset) resolves to a canonical dict whose
hash fingerprints every artifact. One run executes the selected pipelines
(centralized, federated, DP-federated grid) for every seed and writes
JSON-Lines records, CSV tables, and a rendered text report; records are
byte-identical across reruns, with timestamps quarantined in meta.json.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import analysis, corpus, features, model
from .corpus import Label
from .fedcore import FedConfig, run_centralized, run_federated
from .model import ExampleSet, ParameterVector, TrainConfig
from .privacy import PrivacySpec
from .seeding import derive_seed

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


class MismatchedPairs(ValueError):
    pass


# --------------------------------------------------------------------------
# Configuration schema, presets, resolution
# --------------------------------------------------------------------------

DEFAULTS: dict = {
    "dataset": {
        "source": "synth",
        "path": "",
        "synth": {
            "n_treatment": 465,
            "n_control": 535,
            "marker_density": 0.02,
            "vocab_health": 40,
            "vocab_negemo": 40,
            "vocab_generic": 4000,
            "vocab_entertainment": 100,
            "token_mean": 6324.0,
            "token_sd": 10686.0,
            "generic_burstiness": 1.0,
        },
    },
    "features": {"dim": 2**15, "mode": "tf"},
    "train": {
        "lr": 4e-5,
        "epochs": 50,
        "patience": 5,
        "batch_size": 32,
        "l2": 0.0,
        "optimizer": "sgd",
    },
    "centralized": {},  # per-key overrides of [train] for the pooled baseline
    "fed": {
        "rounds": 100,
        "client_fraction": [0.1, 0.3, 0.5, 0.7],
        "aggregator": "fedavg",
        "prox_mu": 0.01,
        "server_opt": "adam",
        "server_lr": 1e-3,
        "patience": 5,
    },
    "privacy": {
        "enabled": False,
        "epsilon": [10.0],
        "delta": 1e-5,
        "clip_norm": 1.0,
        "schedule": "constant",
        "sensitivity": "add_remove",
        "calibration": "classical",
    },
    "analysis": {"audit": False, "top_k": 50},
    "run": {
        "settings": ["centralized"],
        "seeds": [0, 1, 2, 3, 4],
        "out": "results",
        "save_models": False,
    },
}

# "paper" is the full-scale configuration (the defaults above); "desk"
# shrinks the benchmark so the whole grid runs in minutes. The desk client
# lr is tuned for the linear model at this scale (4e-5 targets transformer
# fine-tuning and barely moves a linear model); the analytic calibration
# keeps the epsilon grid valid where per-round epsilon reaches 1 or more.
PRESETS: dict[str, dict] = {
    "paper": {},
    "desk": {
        "dataset": {
            "synth": {
                "n_treatment": 93,
                "n_control": 107,
                "marker_density": 0.15,
                "vocab_health": 10,
                "vocab_negemo": 10,
                "vocab_generic": 300,
                "vocab_entertainment": 50,
                "token_mean": 600.0,
                "token_sd": 900.0,
                "generic_burstiness": 0.4,
            },
        },
        "features": {"dim": 2**13},
        "train": {"lr": 0.4, "epochs": 3},
        "centralized": {"epochs": 50},
        "fed": {
            "rounds": 20,
            "client_fraction": [0.7],
            "aggregator": "fedprox",
            "patience": 0,
        },
        "privacy": {"epsilon": [1.0, 10.0, 100.0], "calibration": "analytic"},
    },
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            # Empty tables (like [centralized]) accept sparse overrides;
            # validation still checks the keys afterwards.
            if base:
                raise ConfigError(here, "unknown configuration key")
            out[key] = copy.deepcopy(value)
            continue
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(here, f"expected a table, got {type(value).__name__}")
            out[key] = _deep_merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def validate_config(cfg: dict) -> None:
    """Check types and cross-field constraints; raises ConfigError."""
    ds = cfg["dataset"]
    _require(ds["source"] in ("synth", "file"), "dataset.source", "must be 'synth' or 'file'")
    if ds["source"] == "file":
        _require(bool(ds["path"]), "dataset.path", "required when source = 'file'")
    sy = ds["synth"]
    for key in ("n_treatment", "n_control", "vocab_health", "vocab_negemo",
                "vocab_generic", "vocab_entertainment"):
        _require(isinstance(sy[key], int) and sy[key] > 0, f"dataset.synth.{key}",
                 "must be a positive integer")
    _require(_is_num(sy["marker_density"]) and 0.0 <= sy["marker_density"] < 1.0,
             "dataset.synth.marker_density", "must be in [0, 1)")
    for key in ("token_mean", "token_sd"):
        _require(_is_num(sy[key]) and sy[key] > 0, f"dataset.synth.{key}", "must be > 0")
    _require(_is_num(sy["generic_burstiness"]) and 0.0 < sy["generic_burstiness"] <= 1.0,
             "dataset.synth.generic_burstiness", "must be in (0, 1]")

    fe = cfg["features"]
    _require(isinstance(fe["dim"], int) and fe["dim"] >= 2 and fe["dim"] & (fe["dim"] - 1) == 0,
             "features.dim", "must be a power of two >= 2")
    _require(fe["mode"] in ("tf", "tfidf"), "features.mode", "must be 'tf' or 'tfidf'")

    for section in ("train", "centralized"):
        tr = cfg[section]
        for key, pred, msg in (
            ("lr", lambda v: _is_num(v) and v >= 0, "must be >= 0"),
            ("epochs", lambda v: isinstance(v, int) and v >= 1, "must be an integer >= 1"),
            ("patience", lambda v: isinstance(v, int) and v >= 0, "must be an integer >= 0"),
            ("batch_size", lambda v: isinstance(v, int) and v >= 1, "must be an integer >= 1"),
            ("l2", lambda v: _is_num(v) and v >= 0, "must be >= 0"),
            ("optimizer", lambda v: v in ("sgd", "adam"), "must be 'sgd' or 'adam'"),
        ):
            if key in tr:
                _require(pred(tr[key]), f"{section}.{key}", msg)
        if section == "centralized":
            for key in tr:
                _require(key in cfg["train"], f"centralized.{key}", "unknown training key")

    fd = cfg["fed"]
    _require(isinstance(fd["rounds"], int) and fd["rounds"] >= 1, "fed.rounds",
             "must be an integer >= 1")
    _require(isinstance(fd["client_fraction"], list) and fd["client_fraction"],
             "fed.client_fraction", "must be a non-empty list")
    for i, c in enumerate(fd["client_fraction"]):
        _require(_is_num(c) and 0.0 < c <= 1.0, f"fed.client_fraction[{i}]",
                 "must be in (0, 1]")
    _require(fd["aggregator"] in ("fedavg", "fedprox", "fedopt"), "fed.aggregator",
             "must be 'fedavg', 'fedprox', or 'fedopt'")
    _require(_is_num(fd["prox_mu"]) and fd["prox_mu"] >= 0, "fed.prox_mu", "must be >= 0")
    _require(fd["server_opt"] in ("sgd", "adam"), "fed.server_opt", "must be 'sgd' or 'adam'")
    _require(_is_num(fd["server_lr"]) and fd["server_lr"] > 0, "fed.server_lr", "must be > 0")
    _require(isinstance(fd["patience"], int) and fd["patience"] >= 0, "fed.patience",
             "must be an integer >= 0")

    pv = cfg["privacy"]
    _require(isinstance(pv["enabled"], bool), "privacy.enabled", "must be a boolean")
    _require(isinstance(pv["epsilon"], list) and pv["epsilon"], "privacy.epsilon",
             "must be a non-empty list")
    for i, eps in enumerate(pv["epsilon"]):
        _require(_is_num(eps) and eps > 0, f"privacy.epsilon[{i}]", "must be > 0")
    _require(_is_num(pv["delta"]) and 0.0 < pv["delta"] < 1.0, "privacy.delta",
             "must be in (0, 1)")
    _require(_is_num(pv["clip_norm"]) and pv["clip_norm"] > 0, "privacy.clip_norm",
             "must be > 0")
    _require(pv["schedule"] in ("constant", "sqrt_decay"), "privacy.schedule",
             "must be 'constant' or 'sqrt_decay'")
    _require(pv["sensitivity"] in ("add_remove", "replace"), "privacy.sensitivity",
             "must be 'add_remove' or 'replace'")
    _require(pv["calibration"] in ("classical", "analytic"), "privacy.calibration",
             "must be 'classical' or 'analytic'")

    an = cfg["analysis"]
    _require(isinstance(an["audit"], bool), "analysis.audit", "must be a boolean")
    _require(isinstance(an["top_k"], int) and an["top_k"] >= 1, "analysis.top_k",
             "must be an integer >= 1")

    rn = cfg["run"]
    _require(isinstance(rn["settings"], list) and rn["settings"], "run.settings",
             "must be a non-empty list")
    for i, s in enumerate(rn["settings"]):
        _require(s in ("centralized", "federated"), f"run.settings[{i}]",
                 "must be 'centralized' or 'federated'")
    _require(isinstance(rn["seeds"], list) and rn["seeds"], "run.seeds",
             "must be a non-empty list")
    for i, s in enumerate(rn["seeds"]):
        _require(isinstance(s, int), f"run.seeds[{i}]", "must be an integer")
    _require(len(set(rn["seeds"])) == len(rn["seeds"]), "run.seeds", "must be distinct")
    _require(isinstance(rn["save_models"], bool), "run.save_models", "must be a boolean")
    if pv["enabled"]:
        _require("federated" in rn["settings"], "privacy.enabled",
                 "requires 'federated' in run.settings")


def resolve_config(
    file_cfg: dict | None = None,
    preset: str | None = None,
    seed_override: list[int] | None = None,
    out_override: str | None = None,
) -> dict:
    """defaults <- preset <- config file <- CLI overrides, then validate."""
    if preset is not None and preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}")
    cfg = _deep_merge(DEFAULTS, PRESETS.get(preset or "paper", {}))
    if file_cfg:
        cfg = _deep_merge(cfg, file_cfg)
    if seed_override is not None:
        cfg["run"]["seeds"] = list(seed_override)
    if out_override is not None:
        cfg["run"]["out"] = out_override
    validate_config(cfg)
    return cfg


def load_config_file(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"invalid TOML: {exc}") from exc


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """Hash of the canonicalized config; key order never matters."""
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:16]


# --------------------------------------------------------------------------
# Pipeline plumbing
# --------------------------------------------------------------------------


def synth_spec_from(cfg: dict, seed: int) -> corpus.SynthSpec:
    sy = cfg["dataset"]["synth"]
    return corpus.SynthSpec(
        n_treatment=sy["n_treatment"],
        n_control=sy["n_control"],
        marker_density=float(sy["marker_density"]),
        vocab_health=sy["vocab_health"],
        vocab_negemo=sy["vocab_negemo"],
        vocab_generic=sy["vocab_generic"],
        vocab_entertainment=sy["vocab_entertainment"],
        token_mean=float(sy["token_mean"]),
        token_sd=float(sy["token_sd"]),
        generic_burstiness=float(sy["generic_burstiness"]),
        seed=seed,
    )


def train_config_from(cfg: dict, section: str, seed: int) -> TrainConfig:
    merged = dict(cfg["train"])
    if section == "centralized":
        merged.update(cfg["centralized"])
    return TrainConfig(
        lr=float(merged["lr"]),
        epochs=merged["epochs"],
        early_stop_patience=merged["patience"],
        batch_size=merged["batch_size"],
        l2=float(merged["l2"]),
        optimizer=merged["optimizer"],
        seed=seed,
    )


def vectorize_records(records: list[corpus.UserRecord], space: features.FeatureSpace) -> ExampleSet:
    vectors = [features.vectorize(rec.full_text(), space) for rec in records]
    y = np.array([1.0 if r.label is Label.TREATMENT else 0.0 for r in records])
    return ExampleSet(features.stack(vectors, space.dim), y, tuple(r.user_id for r in records))


@dataclass
class SeedContext:
    """Everything one seed's pipelines share."""

    seed: int
    split: corpus.DatasetSplit
    space: features.FeatureSpace
    train_set: ExampleSet
    val_set: ExampleSet
    test_set: ExampleSet
    shards: list[corpus.ClientShard]
    background: np.ndarray  # train-split feature mean, the SHAP reference
    marker_tokens: set[str] | None  # planted markers when synthetic


def prepare_seed(cfg: dict, seed: int) -> SeedContext:
    if cfg["dataset"]["source"] == "synth":
        spec = synth_spec_from(cfg, seed)
        records = corpus.synth_generate(spec)
        markers = corpus.build_vocab(spec).marker_tokens()
    else:
        records = corpus.load_dataset(cfg["dataset"]["path"])
        markers = None
    split = corpus.stratified_split(records, seed)
    space = features.fit(
        [r.full_text() for r in split.train], dim=cfg["features"]["dim"],
        mode=cfg["features"]["mode"],
    )
    train_set = vectorize_records(split.train, space)
    val_set = vectorize_records(split.validation, space)
    test_set = vectorize_records(split.test, space)
    shards = corpus.partition_clients(split.train, space)
    background = features.mean_dense(train_set.X)
    return SeedContext(seed, split, space, train_set, val_set, test_set, shards,
                       background, markers)


@dataclass
class ResultsBundle:
    """All artifacts of one run, traceable to (config hash, seed)."""

    config: dict
    hash: str
    metrics: list[dict] = field(default_factory=list)
    rounds: list[dict] = field(default_factory=list)
    ledger: list[dict] = field(default_factory=list)
    attributions: list[dict] = field(default_factory=list)
    comparisons: list[dict] = field(default_factory=list)
    models: list[dict] = field(default_factory=list)

    RECORD_FILES = {
        "metrics": "records/metrics.jsonl",
        "rounds": "records/rounds.jsonl",
        "ledger": "records/ledger.jsonl",
        "attributions": "records/attribution.jsonl",
        "comparisons": "records/comparisons.jsonl",
    }

    def write(self, out_dir: str | Path, meta: dict | None = None) -> Path:
        out = Path(out_dir)
        (out / "records").mkdir(parents=True, exist_ok=True)
        (out / "tables").mkdir(exist_ok=True)
        (out / "config.resolved.json").write_text(
            canonical_json({"config": self.config, "hash": self.hash}) + "\n", encoding="utf-8"
        )
        for attr, rel in self.RECORD_FILES.items():
            rows = getattr(self, attr)
            with open(out / rel, "w", encoding="utf-8", newline="\n") as fh:
                for row in rows:
                    fh.write(canonical_json(row) + "\n")
        if self.models:
            (out / "models").mkdir(exist_ok=True)
            for entry in self.models:
                name = _grid_tag(entry) + ".json"
                (out / "models" / name).write_text(canonical_json(entry) + "\n", encoding="utf-8")
        for name, text in render_tables_csv(self).items():
            (out / "tables" / name).write_text(text, encoding="utf-8")
        (out / "report.txt").write_text(report(self), encoding="utf-8")
        if meta is not None:
            (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n",
                                           encoding="utf-8")
        (out / "bundle.json").write_text(
            canonical_json({"hash": self.hash, "complete": True}) + "\n", encoding="utf-8"
        )
        return out

    @classmethod
    def load(cls, out_dir: str | Path) -> "ResultsBundle":
        out = Path(out_dir)
        manifest = json.loads((out / "bundle.json").read_text(encoding="utf-8"))
        resolved = json.loads((out / "config.resolved.json").read_text(encoding="utf-8"))
        bundle = cls(config=resolved["config"], hash=manifest["hash"])
        for attr, rel in cls.RECORD_FILES.items():
            p = out / rel
            if p.exists():
                rows = [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines()
                        if line.strip()]
                setattr(bundle, attr, rows)
        return bundle


def _grid_tag(row: dict) -> str:
    parts = [row["setting"]]
    if row.get("aggregator"):
        parts.append(row["aggregator"])
    if row.get("client_fraction") is not None:
        parts.append(f"c{row['client_fraction']:g}")
    if row.get("epsilon") is not None:
        parts.append(f"eps{row['epsilon']:g}")
    parts.append(f"seed{row['seed']}")
    return "-".join(parts)


def _grid_key(row: dict) -> tuple:
    return (row["setting"], row.get("aggregator"), row.get("client_fraction"),
            row.get("epsilon"))


# --------------------------------------------------------------------------
# run / compare / report
# --------------------------------------------------------------------------


def run(cfg: dict, out_dir: str | Path | None = None, reuse: bool = True) -> ResultsBundle:
    """Execute every configured pipeline for every seed.

    Rerunning with an unchanged config reuses a completed bundle in the
    output directory (the records are bit-reproducible either way).
    """
    validate_config(cfg)
    h = config_hash(cfg)
    out = Path(out_dir) if out_dir is not None else Path(cfg["run"]["out"])
    manifest = out / "bundle.json"
    if reuse and manifest.exists():
        try:
            existing = json.loads(manifest.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            existing = {}
        if existing.get("hash") == h and existing.get("complete"):
            logger.info("reusing completed bundle %s (hash %s)", out, h)
            return ResultsBundle.load(out)

    started = time.time()
    bundle = ResultsBundle(config=cfg, hash=h)
    audit = cfg["analysis"]["audit"]
    top_k = cfg["analysis"]["top_k"]
    lexicon = analysis.Lexicon.default()

    for seed in cfg["run"]["seeds"]:
        ctx = prepare_seed(cfg, seed)
        if "centralized" in cfg["run"]["settings"]:
            tc = train_config_from(cfg, "centralized", derive_seed(seed, "centralized"))
            w, report_ = run_centralized(ctx.train_set, ctx.val_set, ctx.test_set, tc)
            base = {"setting": "centralized", "aggregator": None, "client_fraction": None,
                    "epsilon": None, "seed": seed}
            _record_run(bundle, cfg, base, w, report_, None, ctx, lexicon, top_k, audit)
        if "federated" in cfg["run"]["settings"]:
            eps_grid = cfg["privacy"]["epsilon"] if cfg["privacy"]["enabled"] else [None]
            for frac in cfg["fed"]["client_fraction"]:
                for eps in eps_grid:
                    fed_cfg = FedConfig(
                        rounds=cfg["fed"]["rounds"],
                        local=train_config_from(cfg, "train", 0),
                        client_fraction=float(frac),
                        aggregator=cfg["fed"]["aggregator"],
                        prox_mu=float(cfg["fed"]["prox_mu"]),
                        server_opt=cfg["fed"]["server_opt"],
                        server_lr=float(cfg["fed"]["server_lr"]),
                        patience=cfg["fed"]["patience"],
                        seed=derive_seed(seed, "federated"),
                    )
                    spec = None
                    if eps is not None:
                        spec = PrivacySpec(
                            epsilon_total=float(eps),
                            rounds=cfg["fed"]["rounds"],
                            delta=float(cfg["privacy"]["delta"]),
                            clip_norm=float(cfg["privacy"]["clip_norm"]),
                            schedule=cfg["privacy"]["schedule"],
                            sensitivity=cfg["privacy"]["sensitivity"],
                            calibration=cfg["privacy"]["calibration"],
                        )
                    history = run_federated(ctx.shards, fed_cfg, ctx.val_set, ctx.test_set, spec)
                    base = {
                        "setting": "federated",
                        "aggregator": cfg["fed"]["aggregator"],
                        "client_fraction": float(frac),
                        "epsilon": None if eps is None else float(eps),
                        "seed": seed,
                    }
                    _record_run(bundle, cfg, base, history.final, history.test_report,
                                history, ctx, lexicon, top_k, audit)

    _compute_comparisons(bundle)
    meta = {
        "started_unix": started,
        "finished_unix": time.time(),
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
    }
    bundle.write(out, meta=meta)
    return bundle


def _record_run(bundle, cfg, base, w, report_, history, ctx, lexicon, top_k, audit) -> None:
    row = dict(base)
    row.update(report_.to_record())
    if history is not None:
        row["stop_reason"] = history.stop_reason
        row["rounds_run"] = len(history.rounds)
    row["config_hash"] = bundle.hash
    bundle.metrics.append(row)

    if history is not None:
        for rec in history.rounds:
            round_row = dict(base)
            round_row.update(rec.to_record())
            bundle.rounds.append(round_row)
        if history.ledger is not None:
            cumulative = 0.0
            for entry in history.ledger.entries:
                cumulative += entry.epsilon
                ledger_row = dict(base)
                ledger_row.update({
                    "round": entry.round_index,
                    "epsilon_round": entry.epsilon,
                    "delta_round": entry.delta,
                    "sigma": entry.sigma,
                    "epsilon_cumulative": cumulative,
                })
                bundle.ledger.append(ledger_row)

    if audit:
        att = analysis.top_features(
            w, ctx.test_set, ctx.space, lexicon, k=top_k,
            background_mean=ctx.background, background_name="train",
        )
        att_row = dict(base)
        att_row.update(att.to_record())
        tokens = att.tokens()
        if ctx.marker_tokens is not None and tokens:
            att_row["marker_share"] = len(tokens & ctx.marker_tokens) / len(tokens)
        else:
            att_row["marker_share"] = None
        bundle.attributions.append(att_row)

    if cfg["run"]["save_models"]:
        bundle.models.append(dict(base, schema_version=1, dim=w.dim,
                                  config_hash=bundle.hash,
                                  weights=w.weights.tolist(), bias=w.bias))


def _compute_comparisons(bundle: ResultsBundle) -> None:
    """Paired Wilcoxon of centralized vs each federated grid point."""
    central = {r["seed"]: r for r in bundle.metrics if r["setting"] == "centralized"}
    if not central:
        return
    grid_points = sorted(
        {_grid_key(r) for r in bundle.metrics if r["setting"] == "federated"},
        key=lambda k: tuple(str(x) for x in k),
    )
    for key in grid_points:
        fed = {r["seed"]: r for r in bundle.metrics if _grid_key(r) == key}
        seeds = sorted(set(central) & set(fed))
        if len(seeds) < 2:
            continue
        a = [central[s]["macro_f1"] for s in seeds]
        b = [fed[s]["macro_f1"] for s in seeds]
        result = analysis.wilcoxon_signed_rank(a, b)
        bundle.comparisons.append({
            "baseline": "centralized",
            "against": {"setting": key[0], "aggregator": key[1],
                        "client_fraction": key[2], "epsilon": key[3]},
            "seeds": seeds,
            "mean_diff": float(np.mean(np.array(a) - np.array(b))),
            "statistic": result.statistic,
            "p_value": result.p_value,
            "n_effective": result.n_effective,
        })


def compare(
    bundle_a: ResultsBundle,
    bundle_b: ResultsBundle,
    filter_a: dict | None = None,
    filter_b: dict | None = None,
) -> dict:
    """Paired Wilcoxon over matched (configuration, seed) macro-F1 scores.

    Optional filters restrict each side (e.g. {"setting": "centralized"});
    after filtering, each bundle must contribute exactly one row per seed.
    """
    def select(bundle, flt):
        rows = [r for r in bundle.metrics
                if all(r.get(k) == v for k, v in (flt or {}).items())]
        by_seed: dict[int, dict] = {}
        for r in rows:
            if r["seed"] in by_seed:
                raise MismatchedPairs(
                    f"seed {r['seed']} matches multiple rows; add filters "
                    f"(e.g. setting/epsilon/client_fraction)"
                )
            by_seed[r["seed"]] = r
        return by_seed

    rows_a = select(bundle_a, filter_a)
    rows_b = select(bundle_b, filter_b)
    seeds = sorted(set(rows_a) & set(rows_b))
    if len(seeds) < 2:
        raise MismatchedPairs(
            f"need at least 2 matched seeds, got {len(seeds)} "
            f"(a: {sorted(rows_a)}, b: {sorted(rows_b)})"
        )
    a = [rows_a[s]["macro_f1"] for s in seeds]
    b = [rows_b[s]["macro_f1"] for s in seeds]
    result = analysis.wilcoxon_signed_rank(a, b)
    return {
        "seeds": seeds,
        "macro_f1_a": a,
        "macro_f1_b": b,
        "mean_diff": float(np.mean(np.array(a) - np.array(b))),
        "statistic": result.statistic,
        "p_value": result.p_value,
        "n_effective": result.n_effective,
    }


# --------------------------------------------------------------------------
# Rendering (pure functions of the bundle)
# --------------------------------------------------------------------------


def _median(values: list[float]) -> float:
    return float(np.median(np.array(values)))


def _dp_cells(bundle: ResultsBundle):
    """(epsilon, fraction) -> median recall/F1 over seeds, as percentages."""
    cells: dict[tuple[float, float], dict[str, list[float]]] = {}
    for row in bundle.metrics:
        if row["setting"] != "federated" or row.get("epsilon") is None:
            continue
        key = (row["epsilon"], row["client_fraction"])
        cell = cells.setdefault(key, {"recall": [], "f1": []})
        cell["recall"].append(row["macro_recall"])
        cell["f1"].append(row["macro_f1"])
    return {
        key: (100.0 * _median(v["recall"]), 100.0 * _median(v["f1"]))
        for key, v in cells.items()
    }


def render_dp_grid(bundle: ResultsBundle) -> str:
    """Privacy-budget grid: rows epsilon, columns client fraction,
    cells 'recall / F1' as percentages with 2 decimals (medians over seeds)."""
    cells = _dp_cells(bundle)
    if not cells:
        return ""
    eps_values = sorted({k[0] for k in cells})
    fractions = sorted({k[1] for k in cells})
    header = ["epsilon"] + [f"c={c:g}" for c in fractions]
    lines = ["DP-FL grid (median macro recall / macro F1, x100)", "  ".join(f"{h:<16}" for h in header).rstrip()]
    for eps in eps_values:
        row = [f"{eps:g}"]
        for c in fractions:
            if (eps, c) in cells:
                recall, f1 = cells[(eps, c)]
                row.append(f"{recall:.2f} / {f1:.2f}")
            else:
                row.append("-")
        lines.append("  ".join(f"{v:<16}" for v in row).rstrip())
    return "\n".join(lines) + "\n"


def _stability_rows(bundle: ResultsBundle) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for row in bundle.metrics:
        groups.setdefault(_grid_key(row), []).append(row)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        rows = sorted(groups[key], key=lambda r: r["seed"])
        if len(rows) < 2:
            continue
        f1s = np.array([r["macro_f1"] for r in rows])
        mean = float(f1s.mean())
        sd = float(f1s.std(ddof=1))
        half = 1.96 * sd / np.sqrt(len(f1s))
        out.append({
            "setting": key[0], "aggregator": key[1], "client_fraction": key[2],
            "epsilon": key[3], "n_seeds": len(rows), "mean_f1": mean, "sd_f1": sd,
            "ci_low": mean - half, "ci_high": mean + half,
        })
    return out


def render_stability(bundle: ResultsBundle) -> str:
    rows = _stability_rows(bundle)
    if not rows:
        return ""
    lines = ["Stability across seeds (macro F1, mean ± SD [95% CI])"]
    for r in rows:
        tag = r["setting"]
        if r["aggregator"]:
            tag += f"/{r['aggregator']}"
        if r["client_fraction"] is not None:
            tag += f" c={r['client_fraction']:g}"
        if r["epsilon"] is not None:
            tag += f" eps={r['epsilon']:g}"
        lines.append(
            f"{tag:<40} {r['mean_f1']:.4f} ± {r['sd_f1']:.4f} "
            f"[{r['ci_low']:.4f}, {r['ci_high']:.4f}] (n={r['n_seeds']})"
        )
    return "\n".join(lines) + "\n"


def render_features(bundle: ResultsBundle) -> str:
    if not bundle.attributions:
        return ""
    lines = ["Top attributed features (mean |SHAP| over the test split)"]
    seen: set[tuple] = set()
    for att in bundle.attributions:
        key = _grid_key(att)
        if key in seen:  # one table per grid point: first seed
            continue
        seen.add(key)
        tag = _grid_tag(att)
        share = att.get("marker_share")
        share_txt = f", marker share {share:.2f}" if share is not None else ""
        lines.append(f"\n[{tag}] k={att['k']}, background={att['background']}{share_txt}")
        lines.append(f"{'rank':<6}{'index':<8}{'score':<12}{'categories':<28}tokens")
        for rank, feat in enumerate(att["features"][:10], start=1):
            lines.append(
                f"{rank:<6}{feat['index']:<8}{feat['mean_abs_shap']:<12.3e}"
                f"{','.join(feat['categories']):<28}{' '.join(feat['tokens'])}"
            )
        hist = ", ".join(f"{k}={v}" for k, v in sorted(att["category_histogram"].items()))
        lines.append(f"category histogram: {hist}")
    return "\n".join(lines) + "\n"


def render_comparisons(bundle: ResultsBundle) -> str:
    if not bundle.comparisons:
        return ""
    lines = ["Centralized vs federated (paired Wilcoxon on macro F1)"]
    for cmp_ in bundle.comparisons:
        ag = cmp_["against"]
        tag = ag["setting"]
        if ag["aggregator"]:
            tag += f"/{ag['aggregator']}"
        if ag["client_fraction"] is not None:
            tag += f" c={ag['client_fraction']:g}"
        if ag["epsilon"] is not None:
            tag += f" eps={ag['epsilon']:g}"
        lines.append(
            f"{tag:<40} mean diff {cmp_['mean_diff']:+.4f}  W={cmp_['statistic']:g}  "
            f"p={cmp_['p_value']:.6g}  n={cmp_['n_effective']}"
        )
    return "\n".join(lines) + "\n"


def report(bundle: ResultsBundle) -> str:
    """Rendered tables; empty sections are omitted, not blank."""
    sections = [
        f"fedtext results (config hash {bundle.hash})\n",
        render_dp_grid(bundle),
        render_stability(bundle),
        render_comparisons(bundle),
        render_features(bundle),
    ]
    return "\n".join(s for s in sections if s)


def render_tables_csv(bundle: ResultsBundle) -> dict[str, str]:
    """CSV renditions of the grid, stability, and features tables."""
    out: dict[str, str] = {}

    cells = _dp_cells(bundle)
    if cells:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epsilon", "client_fraction", "recall_pct", "f1_pct"])
        for (eps, frac) in sorted(cells):
            recall, f1 = cells[(eps, frac)]
            writer.writerow([f"{eps:g}", f"{frac:g}", f"{recall:.2f}", f"{f1:.2f}"])
        out["dp_grid.csv"] = buf.getvalue()

    srows = _stability_rows(bundle)
    if srows:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["setting", "aggregator", "client_fraction", "epsilon",
                         "n_seeds", "mean_f1", "sd_f1", "ci_low", "ci_high"])
        for r in srows:
            writer.writerow([
                r["setting"], r["aggregator"] or "",
                "" if r["client_fraction"] is None else f"{r['client_fraction']:g}",
                "" if r["epsilon"] is None else f"{r['epsilon']:g}",
                r["n_seeds"], f"{r['mean_f1']:.6f}", f"{r['sd_f1']:.6f}",
                f"{r['ci_low']:.6f}", f"{r['ci_high']:.6f}",
            ])
        out["stability.csv"] = buf.getvalue()

    if bundle.attributions:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["setting", "aggregator", "client_fraction", "epsilon", "seed",
                         "rank", "feature_index", "mean_abs_shap", "tokens", "categories"])
        for att in bundle.attributions:
            for rank, feat in enumerate(att["features"], start=1):
                writer.writerow([
                    att["setting"], att.get("aggregator") or "",
                    "" if att.get("client_fraction") is None else f"{att['client_fraction']:g}",
                    "" if att.get("epsilon") is None else f"{att['epsilon']:g}",
                    att["seed"], rank, feat["index"], f"{feat['mean_abs_shap']:.6e}",
                    " ".join(feat["tokens"]), ",".join(feat["categories"]),
                ])
        out["features.csv"] = buf.getvalue()
    return out
