"""Command-line entry points.

Subcommands: synth (write a dataset file), run (execute an experiment
config), compare (paired Wilcoxon across two bundles), report (re-render
tables from a bundle), validate-config. Failures exit nonzero with a
machine-readable JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import corpus, experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedtext")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--preset", choices=sorted(experiment.PRESETS),
                       help="configuration preset supplying defaults")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset file")
    add_config_args(p_synth)
    p_synth.add_argument("--out", required=True, help="output JSONL path")
    p_synth.add_argument("--seed", type=int, default=0)

    p_run = sub.add_parser("run", help="run the configured pipelines")
    add_config_args(p_run)
    p_run.add_argument("--seed-override", help="comma-separated seed list")
    p_run.add_argument("--out", help="output bundle directory")
    p_run.add_argument("--no-reuse", action="store_true",
                       help="recompute even if a completed bundle exists")

    p_cmp = sub.add_parser("compare", help="paired Wilcoxon across two bundles")
    p_cmp.add_argument("bundle_a")
    p_cmp.add_argument("bundle_b")
    p_cmp.add_argument("--filter-a", action="append", default=[], metavar="KEY=VALUE")
    p_cmp.add_argument("--filter-b", action="append", default=[], metavar="KEY=VALUE")
    p_cmp.add_argument("--out", help="optional JSON output path")

    p_rep = sub.add_parser("report", help="render tables from a bundle")
    p_rep.add_argument("bundle")

    p_val = sub.add_parser("validate-config", help="check a config file")
    add_config_args(p_val)

    return parser


def _parse_filters(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise experiment.ConfigError("filter", f"expected KEY=VALUE, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _resolve(args, seed_override=None, out_override=None) -> dict:
    file_cfg = experiment.load_config_file(args.config) if args.config else None
    return experiment.resolve_config(
        file_cfg, preset=args.preset, seed_override=seed_override, out_override=out_override
    )


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            cfg = _resolve(args)
            spec = experiment.synth_spec_from(cfg, args.seed)
            records = corpus.synth_generate(spec)
            corpus.save_dataset(records, args.out)
            print(json.dumps({"written": args.out, "users": len(records)}))
        elif args.command == "run":
            seeds = None
            if args.seed_override:
                seeds = [int(s) for s in args.seed_override.split(",") if s.strip()]
            cfg = _resolve(args, seed_override=seeds, out_override=args.out)
            bundle = experiment.run(cfg, reuse=not args.no_reuse)
            print(json.dumps({"out": cfg["run"]["out"], "hash": bundle.hash,
                              "metrics_records": len(bundle.metrics)}))
        elif args.command == "compare":
            result = experiment.compare(
                experiment.ResultsBundle.load(args.bundle_a),
                experiment.ResultsBundle.load(args.bundle_b),
                filter_a=_parse_filters(args.filter_a),
                filter_b=_parse_filters(args.filter_b),
            )
            text = json.dumps(result, sort_keys=True)
            if args.out:
                with open(args.out, "w", encoding="utf-8") as fh:
                    fh.write(text + "\n")
            print(text)
        elif args.command == "report":
            bundle = experiment.ResultsBundle.load(args.bundle)
            print(experiment.report(bundle), end="")
        elif args.command == "validate-config":
            cfg = _resolve(args)
            print(json.dumps({"valid": True, "hash": experiment.config_hash(cfg)}))
    except Exception as exc:  # machine-readable error record, nonzero exit
        record = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, experiment.ConfigError):
            record["path"] = exc.path
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
