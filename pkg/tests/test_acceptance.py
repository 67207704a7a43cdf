"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The qualitative-trend criteria (8-11) run the desk-preset benchmark through
the config-driven pipeline exactly as a user would; the bundles are built
once per session and shared.
"""

import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from conftest import make_examples, make_shards, random_sparse_vector
from fedtext import analysis, cli, experiment, features, model, privacy
from fedtext.fedcore import ClientUpdate, FedConfig, run_federated
from fedtext.model import ExampleSet, ParameterVector, TrainConfig


def criterion(n: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {n}: {detail}"


def constant_model(dim: int, bias: float) -> ParameterVector:
    return ParameterVector(np.zeros(dim), bias)


def labeled_set(n_treatment: int, n_control: int, dim: int = 8) -> ExampleSet:
    vecs = [features.SparseVector(dim, np.array([0], dtype=np.int64), np.array([1.0]))
            for _ in range(n_treatment + n_control)]
    y = np.array([1.0] * n_treatment + [0.0] * n_control)
    ids = tuple(f"u{i}" for i in range(len(y)))
    return ExampleSet(features.stack(vecs, dim), y, ids)


@pytest.fixture(scope="module")
def dp_bundle(tmp_path_factory):
    cfg = experiment.resolve_config(
        {"privacy": {"enabled": True},
         "fed": {"client_fraction": [0.1, 0.7]},
         "analysis": {"audit": True},
         "run": {"settings": ["federated"],
                 "out": str(tmp_path_factory.mktemp("dp_grid"))}},
        preset="desk",
    )
    return experiment.run(cfg, reuse=False)


@pytest.fixture(scope="module")
def fl_bundle(tmp_path_factory):
    cfg = experiment.resolve_config(
        {"fed": {"client_fraction": [1.0], "aggregator": "fedavg"},
         "analysis": {"audit": True},
         "run": {"settings": ["centralized", "federated"],
                 "out": str(tmp_path_factory.mktemp("fl_viability"))}},
        preset="desk",
    )
    return experiment.run(cfg, reuse=False)


def median_f1(bundle, **match):
    rows = [r["macro_f1"] for r in bundle.metrics
            if all(r.get(k) == v for k, v in match.items())]
    assert len(rows) == 5, (match, len(rows))
    return float(np.median(rows))


def test_criterion_1_degenerate_reconstruction():
    dep = labeled_set(528, 608)
    stb = labeled_set(171, 153)
    checks = []
    for examples, bias, f1_target in ((dep, -50.0, 34.86), (stb, -50.0, 32.07),
                                      (stb, +50.0, 34.55)):
        rep = analysis.evaluate(constant_model(examples.dim, bias), examples)
        checks.append(abs(100.0 * rep.macro_f1 - f1_target) < 0.01)
        checks.append(abs(100.0 * rep.macro_recall - 50.00) < 0.005)
    criterion(1, all(checks),
              "degenerate single-class classifiers hit the closed-form collapse "
              "scores (34.86 / 32.07 / 34.55 F1, 50.00 recall)")


def test_criterion_2_reduction_identities():
    cfg = experiment.resolve_config(preset="desk")
    ctx = experiment.prepare_seed(cfg, 0)
    local = experiment.train_config_from(cfg, "train", 0)
    base = dict(rounds=10, client_fraction=0.7, patience=0, seed=17, local=local,
                record_parameters=True)
    h_avg = run_federated(ctx.shards, FedConfig(aggregator="fedavg", **base), ctx.val_set)
    h_prox = run_federated(ctx.shards, FedConfig(aggregator="fedprox", prox_mu=0.0, **base),
                           ctx.val_set)
    h_opt = run_federated(ctx.shards, FedConfig(aggregator="fedopt", server_opt="sgd",
                                                server_lr=1.0, **base), ctx.val_set)
    gap = 0.0
    for a, b, c in zip(h_avg.rounds, h_prox.rounds, h_opt.rounds):
        gap = max(gap, np.abs(a.parameters - b.parameters).max(),
                  np.abs(a.parameters - c.parameters).max())
    criterion(2, gap <= 1e-12,
              f"FedProx(mu=0) and FedOpt(SGD, lr=1) match FedAvg over 10 rounds "
              f"(max abs gap {gap:.2e} <= 1e-12)")


def test_criterion_3_full_participation_equivalence():
    cfg = experiment.resolve_config(preset="desk")
    ctx = experiment.prepare_seed(cfg, 1)
    local = TrainConfig(lr=0.4, epochs=1, batch_size=10**6, seed=0)
    fed = FedConfig(rounds=1, client_fraction=1.0, aggregator="fedavg", patience=0,
                    seed=3, local=local)
    history = run_federated(ctx.shards, fed, ctx.val_set)
    pooled = ExampleSet(
        features.stack([s.x for s in ctx.shards], ctx.space.dim),
        np.array([1.0 if s.label.value == "treatment" else 0.0 for s in ctx.shards]),
        tuple(s.client_id for s in ctx.shards),
    )
    g = model.gradient(ParameterVector.zeros(ctx.space.dim), pooled).as_array()
    gap = np.abs(history.final.as_array() - (-local.lr * g)).max()
    criterion(3, gap <= 1e-10,
              f"c=1.0 single full-batch round equals the pooled SGD step "
              f"(max abs gap {gap:.2e} <= 1e-10)")


def test_criterion_4_gradient_correctness():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        batch = make_examples(int(rng.integers(1, 8)), 20, seed=trial, nnz=8)
        w = ParameterVector(rng.normal(scale=0.8, size=20), float(rng.normal()))
        ref = ParameterVector(rng.normal(scale=0.8, size=20), float(rng.normal()))
        mu = float(rng.uniform(0.05, 1.0)) if trial % 2 else 0.0
        l2 = float(rng.uniform(0.0, 0.1))
        g = model.gradient(w, batch, ref, mu, l2).as_array()
        arr = w.as_array()
        fd = np.zeros_like(arr)
        h = 1e-5
        for j in range(len(arr)):
            up, down = arr.copy(), arr.copy()
            up[j] += h
            down[j] -= h
            fd[j] = (model.loss(ParameterVector.from_array(up), batch, ref, mu, l2)
                     - model.loss(ParameterVector.from_array(down), batch, ref, mu, l2)) / (2 * h)
        worst = max(worst, np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12))
    criterion(4, worst <= 1e-4,
              f"analytic gradient vs central differences over 100 instances "
              f"(max relative error {worst:.2e} <= 1e-4)")


def test_criterion_5_dp_mechanism():
    checks = {}
    # closed-form sigma at the per-round budget point
    spec = privacy.PrivacySpec(epsilon_total=10.0, rounds=100, delta=1e-5)
    want = 1.0 * math.sqrt(2.0 * math.log(1.25 / 1e-7)) / 0.1
    checks["sigma"] = abs(privacy.calibrate_sigma(spec, 1) - want) <= 1e-9

    # empirical noise scale at one million samples
    sigma = privacy.calibrate_sigma(spec, 1)
    out = privacy.privatize(ClientUpdate("u", np.zeros(1_000_000), n_k=1), spec, 1,
                            np.random.default_rng(99))
    checks["noise_std"] = abs(out.delta.std() / sigma - 1.0) < 0.01

    # post-clip norms
    rng = np.random.default_rng(5)
    norms = [np.linalg.norm(privacy.clip_update(
        rng.normal(scale=rng.uniform(0.01, 50), size=64), 1.0)) for _ in range(500)]
    checks["clip"] = max(norms) <= 1.0 + 1e-12

    # exact ledger accumulation and the halt at round T+1
    shards = make_shards(6, 8, seed=0)
    val = make_examples(3, 8, seed=1)
    run_spec = privacy.PrivacySpec(epsilon_total=2.0, rounds=20, delta=1e-5)
    fed = FedConfig(rounds=21, client_fraction=0.5, aggregator="fedavg", patience=0,
                    seed=0, local=TrainConfig(lr=0.1, epochs=1, batch_size=8, seed=0))
    history = run_federated(shards, fed, val, privacy_spec=run_spec)
    checks["ledger_exact"] = history.ledger.epsilon_spent == 20 * float(run_spec.epsilon_round)
    checks["ledger_total"] = history.ledger.epsilon_spent == 2.0
    checks["halt"] = (history.stop_reason == "budget_exhausted"
                      and len(history.rounds) == 20)
    criterion(5, all(checks.values()),
              f"Gaussian calibration, noise scale, clip bound, exact ledger, "
              f"and budget halt at T+1 ({checks})")


def test_criterion_6_wilcoxon_oracle():
    rng = np.random.default_rng(77)
    ok = True
    for case in range(500):
        n = int(rng.integers(2, 13))
        a = rng.normal(size=n)
        b = rng.normal(size=n)
        if case % 3 == 0:  # ties and zero differences
            a = np.round(a, 1)
            b = np.round(b, 1)
        mine = analysis.wilcoxon_signed_rank(a, b)
        d = a - b
        d = d[d != 0.0]
        m = len(d)
        if m == 0:
            ok &= mine.p_value == 1.0 and mine.statistic == 0.0
            continue
        # independent oracle: enumerate every sign vector directly
        order = np.argsort(np.abs(d), kind="stable")
        ranks = np.empty(m)
        i = 0
        sorted_abs = np.abs(d)[order]
        while i < m:
            j = i
            while j + 1 < m and sorted_abs[j + 1] == sorted_abs[i]:
                j += 1
            ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        signs = ((np.arange(2**m)[:, None] >> np.arange(m)) & 1).astype(float)
        w_all = signs @ ranks
        total = ranks.sum()
        w_obs = min(float(ranks[d > 0].sum()), total - float(ranks[d > 0].sum()))
        p = float(np.sum(np.minimum(w_all, total - w_all) <= w_obs + 1e-9)) / 2**m
        ok &= abs(mine.p_value - p) <= 1e-12 and abs(mine.statistic - w_obs) <= 1e-9
    hand = analysis.wilcoxon_signed_rank([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    ok &= hand.p_value == 0.25 and hand.statistic == 0.0
    criterion(6, ok, "exact p matches brute-force sign enumeration on 500 cases; "
                     "hand case (n=3 all-positive) gives p = 0.25")


def test_criterion_7_shap_efficiency():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        dim = int(rng.integers(4, 128))
        x = random_sparse_vector(dim, int(rng.integers(1, dim)), rng)
        w = ParameterVector(rng.normal(size=dim), float(rng.normal()))
        bg = rng.normal(scale=0.2, size=dim)
        phi = analysis.shap_linear(w, x, bg)
        f_x = float(w.weights[x.indices] @ x.values + w.bias)
        f_bg = float(w.weights @ bg + w.bias)
        worst = max(worst, abs(phi.sum() - (f_x - f_bg)))
    criterion(7, worst <= 1e-9,
              f"sum(phi) = f(x) - f(background) over 1000 instances "
              f"(max abs gap {worst:.2e} <= 1e-9)")


def test_criterion_8_privacy_monotonicity(dp_bundle):
    f1 = {eps: median_f1(dp_bundle, client_fraction=0.7, epsilon=eps)
          for eps in (1.0, 10.0, 100.0)}
    ok = f1[1.0] <= f1[10.0] <= f1[100.0] and (f1[100.0] - f1[1.0]) >= 0.10
    criterion(8, ok,
              f"median F1 non-decreasing in eps at c=0.7: "
              f"{f1[1.0]:.3f} <= {f1[10.0]:.3f} <= {f1[100.0]:.3f}, "
              f"gap {100 * (f1[100.0] - f1[1.0]):.1f} >= 10 points")


def test_criterion_9_client_fraction_effect(dp_bundle):
    low = median_f1(dp_bundle, client_fraction=0.1, epsilon=100.0)
    high = median_f1(dp_bundle, client_fraction=0.7, epsilon=100.0)
    criterion(9, high >= low,
              f"at eps=100, median F1(c=0.7) = {high:.3f} >= F1(c=0.1) = {low:.3f}")


def test_criterion_10_fl_viability(fl_bundle, capsys):
    cent = {r["seed"]: r["macro_f1"] for r in fl_bundle.metrics
            if r["setting"] == "centralized"}
    fed = {r["seed"]: r["macro_f1"] for r in fl_bundle.metrics
           if r["setting"] == "federated"}
    diffs = [abs(cent[s] - fed[s]) for s in sorted(cent)]
    med = float(np.median(diffs))
    out_dir = fl_bundle.config["run"]["out"]
    rc = cli.main(["compare", out_dir, out_dir,
                   "--filter-a", "setting=centralized",
                   "--filter-b", "setting=federated"])
    result = json.loads(capsys.readouterr().out)
    ok = med <= 0.05 and rc == 0 and result["p_value"] >= 0.05 and len(result["seeds"]) == 5
    criterion(10, ok,
              f"centralized vs FedAvg(c=1.0): median |dF1| = {med:.3f} <= 0.05, "
              f"compare p = {result['p_value']:.4g} >= 0.05 over 5 paired configurations")


def test_criterion_11_attribution_audit(dp_bundle, fl_bundle):
    dp_shares = [r["marker_share"] for r in dp_bundle.attributions
                 if r["client_fraction"] == 0.7 and r["epsilon"] == 1.0]
    fl_shares = [r["marker_share"] for r in fl_bundle.attributions
                 if r["setting"] == "federated"]
    dp_med, fl_med = float(np.median(dp_shares)), float(np.median(fl_shares))
    criterion(11, dp_med < fl_med,
              f"planted-marker share of top-50: eps=1 DP-FL {dp_med:.3f} < "
              f"noiseless FL {fl_med:.3f} (medians over 5 seeds)")


def test_criterion_12_determinism(tmp_path):
    overrides = {
        "dataset": {"synth": {"n_treatment": 20, "n_control": 20,
                              "marker_density": 0.2, "vocab_health": 5,
                              "vocab_negemo": 5, "vocab_generic": 60,
                              "vocab_entertainment": 10, "token_mean": 80.0,
                              "token_sd": 40.0}},
        "features": {"dim": 256},
        "train": {"lr": 0.4, "epochs": 2, "batch_size": 8},
        "fed": {"rounds": 5, "client_fraction": [0.7], "aggregator": "fedprox",
                "patience": 0},
        "privacy": {"enabled": True, "epsilon": [3.0], "calibration": "analytic"},
        "run": {"settings": ["centralized", "federated"], "seeds": [0, 1],
                "out": str(tmp_path / "det")},
    }
    cfg = experiment.resolve_config(overrides)
    experiment.run(cfg, reuse=False)
    records = Path(cfg["run"]["out"]) / "records"
    first = {p.name: p.read_bytes() for p in records.glob("*.jsonl")}
    shutil.rmtree(cfg["run"]["out"])
    experiment.run(cfg, reuse=False)
    second = {p.name: p.read_bytes() for p in records.glob("*.jsonl")}
    ok = first == second and "metrics.jsonl" in first
    criterion(12, ok, "rerunning the same config yields byte-identical records "
                      f"({sorted(first)})")
