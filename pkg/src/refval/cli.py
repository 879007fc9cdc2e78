"""Command-line entry points.

    refval corrupt          --config cfg.json --out DIR [--seed S]
    refval train-value      --config cfg.json --out DIR [--seed S]
    refval baseline         --config cfg.json --out DIR --method loo|if|gradnd [--seed S]
    refval report           --config cfg.json --out DIR
    refval probe-volatility --config cfg.json --out DIR [--engine adaptive|basic]

All settings live in the config file (JSON, or TOML on python >= 3.11);
--seed and --out are the only overrides. Exit codes: 0 success, 2 config
error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import baselines as B
from . import bench
from . import dataio as D
from .errors import (ConfigError, DimensionError, FormatError, NumericError,
                     ParameterError, ParseError, SchemaError, SolverError,
                     StoreError)
from .numkit import RngState
from .trainer import run_training
from .valuation import AdaptiveValuator, volatility_probe

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _load(args) -> bench.ExperimentConfig:
    config = bench.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seeds=(args.seed,))
    return config


def _single_seed(config) -> int:
    return config.seeds[0]


def cmd_corrupt(args) -> int:
    config = _load(args)
    seed = _single_seed(config)
    base = bench.build_dataset(config.data)
    spec = bench._corruption_spec(config.corruption,
                                  RngState(seed).derive(bench.STREAM_CORRUPT))
    corrupted = D.corrupt(base, spec)
    os.makedirs(args.out, exist_ok=True)
    D.save_csv(corrupted, os.path.join(args.out, "dataset.csv"))
    entries = D.corruption_manifest(base, corrupted)
    D.write_corruption_manifest(entries, os.path.join(args.out, "corruption.json"))
    print(f"wrote {len(entries)} corrupted samples to {args.out}")
    return EXIT_OK


def cmd_train_value(args) -> int:
    config = _load(args)
    seed = _single_seed(config)
    srng = RngState(seed)
    base = bench.build_dataset(config.data)
    corrupted = D.corrupt(base, bench._corruption_spec(
        config.corruption, srng.derive(bench.STREAM_CORRUPT)))
    spec = config.model.spec_for(corrupted.n_features, corrupted.n_classes)
    tc = config.training.train_config(srng.derive(bench.STREAM_TRAIN))
    valuator = AdaptiveValuator(corrupted, tc.total_steps, config.valuation)
    run_training(corrupted, spec, tc, hooks=[valuator], store="light")
    os.makedirs(args.out, exist_ok=True)
    valuator.ledger.write_step_csv(os.path.join(args.out, "step_values.csv"))
    valuator.ledger.write_cumulative_csv(os.path.join(args.out, "cumulative.csv"))
    with open(os.path.join(args.out, "run_manifest.json"), "w", encoding="utf-8") as f:
        json.dump({"seed": seed, "valuation": config.valuation.to_dict(),
                   "training": dataclasses.asdict(config.training),
                   "model_spec": spec.to_dict()}, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"valued {len(valuator.ledger.cumulative)} samples over "
          f"{tc.total_steps} steps -> {args.out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    config = _load(args)
    seed = _single_seed(config)
    srng = RngState(seed)
    base = bench.build_dataset(config.data)
    corrupted = D.corrupt(base, bench._corruption_spec(
        config.corruption, srng.derive(bench.STREAM_CORRUPT)))
    entries = D.corruption_manifest(base, corrupted)
    pool = bench.build_pool([e["id"] for e in entries],
                            corrupted.ids[~corrupted.corruption_mask],
                            config.pool_size, srng.derive(bench.STREAM_POOL))
    spec = config.model.spec_for(corrupted.n_features, corrupted.n_classes)
    tc = config.training.train_config(srng.derive(bench.STREAM_TRAIN))
    if args.method == B.METHOD_LOO:
        loo_pool = pool if config.loo_pool_size is None else pool[:config.loo_pool_size]
        res = B.loo_values(corrupted, spec, tc, loo_pool)
    elif args.method == B.METHOD_IF:
        res = B.influence_values(corrupted, spec, tc, pool, damping=config.if_damping,
                                 cg_tol=config.if_cg_tol,
                                 cg_max_iter=config.if_cg_max_iter)
    else:
        res = B.gradnorm_values(corrupted, spec, tc, pool)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, f"values_{res.method}.csv")
    bench._write_csv(out_csv, ["sample_id", "value"],
                     [[sid, repr(res.values[sid])] for sid in sorted(res.values)])
    print(f"{res.method}: {len(res.values)} values in {res.wall_time_s:.2f}s, "
          f"peak rss {res.peak_memory_bytes // (1 << 20)} MiB -> {out_csv}")
    return EXIT_OK


def cmd_report(args) -> int:
    config = _load(args)
    result = bench.run_experiment(config)
    paths = bench.export_results(result, args.out)
    if result.failure_stage is not None:
        print(f"FAILED at stage {result.failure_stage}: {result.failure_message}",
              file=sys.stderr)
        print(f"partial results -> {paths['results']}")
        return EXIT_NUMERIC
    for method, stats in result.summary.items():
        print(f"{method}: detected {stats['mean']:.1f} +/- {stats['std']:.1f} "
              f"of k={config.corruption.k} (seeds={list(config.seeds)})")
    print(f"results -> {paths['results']}")
    return EXIT_OK


def cmd_probe_volatility(args) -> int:
    config = _load(args)
    base = bench.build_dataset(config.data)
    spec = config.model.spec_for(base.n_features, base.n_classes)
    tc = config.training.train_config(RngState(config.seeds[0]).derive(bench.STREAM_TRAIN))
    report = volatility_probe(base, spec, tc, config.seeds,
                              valuation=config.valuation, engine=args.engine)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "volatility.csv")
    bench._write_csv(out_csv,
                     ["sample_id", "step", "sigma", "bound", "bound_tight", "n_obs"],
                     [[p.sample_id, p.step, repr(p.sigma), repr(p.bound),
                       repr(p.bound_tight), p.n_observations] for p in report.pairs])
    print(f"{report.n_pairs} (sample, step) pairs, {len(report.violations)} above "
          f"the stated bound, {report.n_skipped} skipped -> {out_csv}")
    return EXIT_OK if not report.violations else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refval",
                                     description="training-time data valuation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method=False, engine=False):
        p.add_argument("--config", required=True, help="JSON/TOML experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed list with one seed")
        if method:
            p.add_argument("--method", required=True,
                           choices=[B.METHOD_LOO, B.METHOD_IF, B.METHOD_GRADND])
        if engine:
            p.add_argument("--engine", default="adaptive",
                           choices=["adaptive", "basic"])

    common(sub.add_parser("corrupt", help="corrupt a dataset and write it out"))
    common(sub.add_parser("train-value", help="train with the valuation hook"))
    common(sub.add_parser("baseline", help="run one baseline method"), method=True)
    common(sub.add_parser("report", help="full detection experiment"))
    common(sub.add_parser("probe-volatility", help="multi-seed stability probe"),
           engine=True)
    return parser


_HANDLERS = {
    "corrupt": cmd_corrupt,
    "train-value": cmd_train_value,
    "baseline": cmd_baseline,
    "report": cmd_report,
    "probe-volatility": cmd_probe_volatility,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, SchemaError, ParameterError, DimensionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, SolverError, StoreError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError, FormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
