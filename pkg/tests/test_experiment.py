import json
from pathlib import Path

import numpy as np
import pytest

from fedtext import analysis, cli, experiment
from fedtext.experiment import (
    ConfigError,
    MismatchedPairs,
    ResultsBundle,
    compare,
    config_hash,
    render_dp_grid,
    report,
    resolve_config,
    run,
    validate_config,
)

# A tiny corpus/config that exercises every pipeline in a few seconds.
TINY = {
    "dataset": {"synth": {
        "n_treatment": 20, "n_control": 20, "marker_density": 0.2,
        "vocab_health": 5, "vocab_negemo": 5, "vocab_generic": 60,
        "vocab_entertainment": 10, "token_mean": 80.0, "token_sd": 40.0,
        "generic_burstiness": 0.5,
    }},
    "features": {"dim": 256},
    "train": {"lr": 0.4, "epochs": 2, "batch_size": 8},
    "centralized": {"epochs": 10},
    "fed": {"rounds": 4, "client_fraction": [1.0], "aggregator": "fedavg", "patience": 0},
    "run": {"settings": ["centralized"], "seeds": [0, 1], "out": "unused"},
}


def tiny_config(tmp_path, **overrides):
    cfg = json.loads(json.dumps(TINY))  # deep copy
    for key, section in overrides.items():
        if isinstance(section, dict):
            for k, v in section.items():
                cfg.setdefault(key, {})
                if isinstance(v, dict):
                    cfg[key].setdefault(k, {}).update(v)
                else:
                    cfg[key][k] = v
        else:
            cfg[key] = section
    cfg["run"]["out"] = str(tmp_path / "out")
    return resolve_config(cfg)


class TestConfigResolution:
    def test_defaults_carry_full_scale_hyperparameters(self):
        cfg = resolve_config()
        assert cfg["train"]["lr"] == 4e-5
        assert cfg["train"]["epochs"] == 50 and cfg["train"]["patience"] == 5
        assert cfg["train"]["batch_size"] == 32
        assert cfg["fed"]["rounds"] == 100 and cfg["fed"]["server_lr"] == 1e-3
        assert cfg["fed"]["prox_mu"] == 0.01
        assert cfg["privacy"]["delta"] == 1e-5 and cfg["privacy"]["clip_norm"] == 1.0
        assert cfg["run"]["seeds"] == [0, 1, 2, 3, 4]

    def test_unknown_key_reports_path(self):
        with pytest.raises(ConfigError) as err:
            resolve_config({"fed": {"cadence": 3}})
        assert err.value.path == "fed.cadence"

    def test_privacy_requires_federated(self):
        with pytest.raises(ConfigError) as err:
            resolve_config({"privacy": {"enabled": True},
                            "run": {"settings": ["centralized"]}})
        assert "federated" in str(err.value)

    def test_type_errors_have_paths(self):
        with pytest.raises(ConfigError) as err:
            resolve_config({"features": {"dim": 100}})
        assert err.value.path == "features.dim"
        with pytest.raises(ConfigError) as err:
            resolve_config({"run": {"seeds": [0, 0]}})
        assert err.value.path == "run.seeds"
        with pytest.raises(ConfigError) as err:
            resolve_config({"fed": {"client_fraction": [0.0]}})
        assert err.value.path == "fed.client_fraction[0]"

    def test_seed_and_out_overrides(self):
        cfg = resolve_config(seed_override=[7, 8], out_override="/tmp/x")
        assert cfg["run"]["seeds"] == [7, 8] and cfg["run"]["out"] == "/tmp/x"

    def test_hash_ignores_key_order(self):
        a = {"features": {"dim": 512, "mode": "tf"}, "train": {"lr": 0.1}}
        b = {"train": {"lr": 0.1}, "features": {"mode": "tf", "dim": 512}}
        assert config_hash(resolve_config(a)) == config_hash(resolve_config(b))

    def test_hash_sensitive_to_values(self):
        a = resolve_config({"train": {"lr": 0.1}})
        b = resolve_config({"train": {"lr": 0.2}})
        assert config_hash(a) != config_hash(b)

    def test_presets_resolve(self):
        desk = resolve_config(preset="desk")
        paper = resolve_config(preset="paper")
        assert desk["fed"]["rounds"] < paper["fed"]["rounds"]
        assert paper["dataset"]["synth"]["token_mean"] == 6324.0
        with pytest.raises(ConfigError):
            resolve_config(preset="galactic")

    def test_toml_roundtrip(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text(
            '[train]\nlr = 0.25\n\n[fed]\nrounds = 7\nclient_fraction = [0.5]\n'
        )
        cfg = resolve_config(experiment.load_config_file(path))
        assert cfg["train"]["lr"] == 0.25 and cfg["fed"]["rounds"] == 7


class TestRunPipelines:
    def test_centralized_bundle_structure(self, tmp_path):
        cfg = tiny_config(tmp_path)
        bundle = run(cfg, reuse=False)
        assert len(bundle.metrics) == 2  # one row per seed
        for row in bundle.metrics:
            assert row["setting"] == "centralized"
            assert 0.0 <= row["macro_f1"] <= 1.0
            assert row["config_hash"] == bundle.hash
        out = Path(cfg["run"]["out"])
        for rel in ("config.resolved.json", "records/metrics.jsonl", "report.txt",
                    "tables/stability.csv", "bundle.json", "meta.json"):
            assert (out / rel).exists(), rel

    def test_federated_and_ledger_records(self, tmp_path):
        cfg = tiny_config(
            tmp_path,
            run={"settings": ["federated"], "seeds": [0]},
            privacy={"enabled": True, "epsilon": [2.0], "calibration": "classical"},
        )
        bundle = run(cfg, reuse=False)
        assert len(bundle.metrics) == 1
        row = bundle.metrics[0]
        assert row["rounds_run"] == 4 and row["stop_reason"] == "completed"
        assert len(bundle.ledger) == 4  # one row per round
        cum = [r["epsilon_cumulative"] for r in bundle.ledger]
        assert cum == sorted(cum)
        assert cum[-1] == pytest.approx(2.0)
        assert len(bundle.rounds) == 4
        assert {r["round"] for r in bundle.rounds} == {1, 2, 3, 4}

    def test_grid_produces_sub_bundles(self, tmp_path):
        cfg = tiny_config(
            tmp_path,
            run={"settings": ["federated"], "seeds": [0]},
            fed={"client_fraction": [0.5, 1.0]},
            privacy={"enabled": True, "epsilon": [5.0, 40.0], "calibration": "analytic"},
        )
        bundle = run(cfg, reuse=False)
        keys = {(r["client_fraction"], r["epsilon"]) for r in bundle.metrics}
        assert keys == {(0.5, 5.0), (0.5, 40.0), (1.0, 5.0), (1.0, 40.0)}

    def test_reuse_skips_recompute(self, tmp_path, monkeypatch):
        cfg = tiny_config(tmp_path)
        first = run(cfg, reuse=False)
        monkeypatch.setattr(experiment, "prepare_seed",
                            lambda *a, **k: pytest.fail("should reuse bundle"))
        second = run(cfg, reuse=True)
        assert second.metrics == first.metrics

    def test_audit_records_marker_share(self, tmp_path):
        cfg = tiny_config(tmp_path, analysis={"audit": True, "top_k": 10},
                          run={"settings": ["centralized"], "seeds": [0]})
        bundle = run(cfg, reuse=False)
        assert len(bundle.attributions) == 1
        att = bundle.attributions[0]
        assert att["background"] == "train"
        assert len(att["features"]) == 10
        assert att["marker_share"] is not None and 0.0 <= att["marker_share"] <= 1.0

    def test_save_models_checkpoints(self, tmp_path):
        cfg = tiny_config(tmp_path, run={"save_models": True, "seeds": [0]})
        bundle = run(cfg, reuse=False)
        files = list((Path(cfg["run"]["out"]) / "models").glob("*.json"))
        assert len(files) == 1
        payload = json.loads(files[0].read_text())
        assert payload["dim"] == 256 and payload["config_hash"] == bundle.hash
        assert len(payload["weights"]) == 256

    def test_determinism_byte_identical(self, tmp_path):
        cfg_a = tiny_config(tmp_path / "a")
        cfg_b = tiny_config(tmp_path / "b")
        run(cfg_a, reuse=False)
        run(cfg_b, reuse=False)
        for rel in ("records/metrics.jsonl", "records/rounds.jsonl", "report.txt"):
            a = (Path(cfg_a["run"]["out"]) / rel).read_bytes()
            b = (Path(cfg_b["run"]["out"]) / rel).read_bytes()
            # out dir differs, so the config hash differs; mask it out
            a = a.replace(config_hash(cfg_a).encode(), b"HASH")
            b = b.replace(config_hash(cfg_b).encode(), b"HASH")
            assert a == b, rel


class TestCompare:
    def make_bundle(self, f1s, setting="centralized", **extra):
        bundle = ResultsBundle(config={}, hash="x")
        for seed, f1 in enumerate(f1s):
            row = {"setting": setting, "aggregator": None, "client_fraction": None,
                   "epsilon": None, "seed": seed, "macro_f1": f1, "macro_recall": 0.5}
            row.update(extra)
            bundle.metrics.append(row)
        return bundle

    def test_self_comparison_all_zero(self):
        bundle = self.make_bundle([0.7, 0.8, 0.9])
        result = compare(bundle, bundle)
        assert result["p_value"] == 1.0 and result["n_effective"] == 0

    def test_paired_comparison(self):
        a = self.make_bundle([0.70, 0.80, 0.90, 0.85, 0.75])
        b = self.make_bundle([0.68, 0.79, 0.91, 0.83, 0.74])
        result = compare(a, b)
        assert result["n_effective"] == 5
        assert 0.0 < result["p_value"] <= 1.0
        assert result["mean_diff"] == pytest.approx(np.mean([0.02, 0.01, -0.01, 0.02, 0.01]))

    def test_filters_disambiguate(self):
        mixed = ResultsBundle(config={}, hash="x")
        mixed.metrics = (self.make_bundle([0.7, 0.8]).metrics
                         + self.make_bundle([0.5, 0.6], setting="federated").metrics)
        with pytest.raises(MismatchedPairs):
            compare(mixed, mixed)
        result = compare(mixed, mixed, filter_a={"setting": "centralized"},
                         filter_b={"setting": "federated"})
        assert result["n_effective"] == 2

    def test_no_overlap_raises(self):
        a = self.make_bundle([0.7, 0.8])
        b = ResultsBundle(config={}, hash="y")
        b.metrics = [dict(a.metrics[0], seed=9)]
        with pytest.raises(MismatchedPairs):
            compare(a, b)


class TestReportRendering:
    def degenerate_bundle(self):
        # DP-FL collapse at eps=1 on the depression-shaped split
        y = np.array([1] * 528 + [0] * 608)
        rep = analysis.metrics_from_predictions(y, np.zeros(1136))
        bundle = ResultsBundle(config={}, hash="deadbeef")
        for seed in range(5):
            for eps, frac in ((1.0, 0.1), (1.0, 0.7)):
                row = {"setting": "federated", "aggregator": "fedprox",
                       "client_fraction": frac, "epsilon": eps, "seed": seed}
                row.update(rep.to_record())
                bundle.metrics.append(row)
        return bundle

    def test_collapse_cell_rendering(self):
        text = render_dp_grid(self.degenerate_bundle())
        assert "50.00 / 34.86" in text

    def test_report_omits_empty_sections(self):
        bundle = ResultsBundle(config={}, hash="x")
        bundle.metrics = [{"setting": "centralized", "aggregator": None,
                           "client_fraction": None, "epsilon": None, "seed": 0,
                           "macro_f1": 0.9, "macro_recall": 0.9}]
        text = report(bundle)
        assert "DP-FL grid" not in text  # no DP rows -> section omitted
        assert "Stability" not in text  # single seed -> no stability rows

    def test_rendering_pure(self):
        bundle = self.degenerate_bundle()
        assert report(bundle) == report(bundle)

    def test_csv_tables_recomputable(self):
        bundle = self.degenerate_bundle()
        tables = experiment.render_tables_csv(bundle)
        assert "dp_grid.csv" in tables and "stability.csv" in tables
        line = [l for l in tables["dp_grid.csv"].splitlines() if l.startswith("1,0.1")][0]
        assert line == "1,0.1,50.00,34.86"


class TestCli:
    def test_validate_config_ok(self, tmp_path, capsys):
        path = tmp_path / "c.toml"
        path.write_text("[train]\nlr = 0.1\n")
        assert cli.main(["validate-config", "--config", str(path)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["valid"] is True and "hash" in out

    def test_validate_config_error_record(self, tmp_path, capsys):
        path = tmp_path / "c.toml"
        path.write_text("[train]\nlr = -1\n")
        assert cli.main(["validate-config", "--config", str(path)]) == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "ConfigError" and err["path"] == "train.lr"

    def test_synth_writes_dataset(self, tmp_path, capsys):
        from fedtext.corpus import load_dataset
        cfg = tmp_path / "c.toml"
        cfg.write_text(
            "[dataset.synth]\nn_treatment = 8\nn_control = 8\n"
            "token_mean = 30.0\ntoken_sd = 10.0\n"
        )
        out = tmp_path / "data.jsonl"
        rc = cli.main(["synth", "--config", str(cfg), "--out", str(out), "--seed", "5"])
        assert rc == 0
        assert len(load_dataset(out)) == 16

    def test_run_and_report_roundtrip(self, tmp_path, capsys):
        cfg_path = tmp_path / "c.toml"
        cfg_path.write_text(
            "[dataset.synth]\n"
            "n_treatment = 20\nn_control = 20\nmarker_density = 0.2\n"
            "vocab_health = 5\nvocab_negemo = 5\nvocab_generic = 60\n"
            "vocab_entertainment = 10\ntoken_mean = 80.0\ntoken_sd = 40.0\n"
            "[features]\ndim = 256\n"
            "[train]\nlr = 0.4\nepochs = 2\nbatch_size = 8\n"
            "[run]\nsettings = ['centralized']\nseeds = [0, 1]\n"
        )
        out_dir = tmp_path / "bundle"
        rc = cli.main(["run", "--config", str(cfg_path), "--out", str(out_dir)])
        assert rc == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["metrics_records"] == 2
        rc = cli.main(["report", str(out_dir)])
        assert rc == 0
        assert "Stability" in capsys.readouterr().out

    def test_cli_compare(self, tmp_path, capsys):
        cfg_a = tiny_config(tmp_path / "a")
        cfg_b = tiny_config(tmp_path / "b")
        run(cfg_a, reuse=False)
        run(cfg_b, reuse=False)
        rc = cli.main(["compare", str(Path(cfg_a["run"]["out"])),
                       str(Path(cfg_b["run"]["out"]))])
        assert rc == 0
        result = json.loads(capsys.readouterr().out)
        assert result["n_effective"] == 0 and result["p_value"] == 1.0  # identical runs

    def test_seed_override_flag(self, tmp_path, capsys):
        cfg_path = tmp_path / "c.toml"
        cfg_path.write_text(
            "[dataset.synth]\n"
            "n_treatment = 20\nn_control = 20\ntoken_mean = 50.0\ntoken_sd = 20.0\n"
            "vocab_health = 5\nvocab_negemo = 5\nvocab_generic = 60\nvocab_entertainment = 10\n"
            "[features]\ndim = 256\n[train]\nlr = 0.4\nepochs = 2\nbatch_size = 8\n"
            "[run]\nsettings = ['centralized']\nseeds = [0, 1, 2, 3, 4]\n"
        )
        out_dir = tmp_path / "bundle"
        rc = cli.main(["run", "--config", str(cfg_path), "--out", str(out_dir),
                       "--seed-override", "3"])
        assert rc == 0
        assert json.loads(capsys.readouterr().out)["metrics_records"] == 1
