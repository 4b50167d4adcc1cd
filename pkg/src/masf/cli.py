"""Command-line experiment runner.

Verbs:
  bench-gen   generate benchmark CSVs from a spec file
  train       train one configuration on the benchmark
  eval        evaluate saved checkpoints on a dataset CSV
  ablate      run the ablation grid and write report.csv
  plot        render metrics.csv columns as an SVG line plot

Configuration comes from a YAML file plus flag overrides; every run writes
a resolved copy of its configuration next to its outputs. The environment
variable MASF_OUT_DIR overrides the output directory.

Exit codes: 0 success, 1 config error, 2 run failure (non-finite loss),
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bench, engine, harness, nets
from .engine import Hyperparams
from .harness import ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_IO = 0, 1, 2, 3


def _load_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    raw: dict = {}
    if path:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    for item in overrides:
        key, _, value = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} is not KEY=VALUE")
        raw[key] = yaml.safe_load(value)

    hp_fields = {f.name for f in dataclasses.fields(Hyperparams)}
    cfg_fields = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"hp"}
    hp_kwargs = {k: v for k, v in raw.items() if k in hp_fields}
    cfg_kwargs = {k: v for k, v in raw.items() if k in cfg_fields}
    unknown = set(raw) - hp_fields - cfg_fields
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "rows" in cfg_kwargs:
        cfg_kwargs["rows"] = [tuple(bool(v) for v in r) for r in cfg_kwargs["rows"]]
    return ExperimentConfig(hp=Hyperparams(**hp_kwargs), **cfg_kwargs)


def _dump_resolved(config: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dataclasses.asdict(config)
    with open(out_dir / "resolved_config.yaml", "w") as f:
        yaml.safe_dump(payload, f, sort_keys=False)


def cmd_bench_gen(args) -> int:
    specs, base_seed = (bench.load_spec_file(args.spec) if args.spec
                        else (bench.canonical_domain_specs(), bench.CANONICAL["base_seed"]))
    if args.seed is not None:
        base_seed = args.seed
    datasets = [bench.make_domain(s, base_seed) for s in specs]
    out = Path(os.environ.get("MASF_OUT_DIR", args.out))
    bench.export_csv(datasets, out / "benchmark.csv")
    print(f"wrote {out / 'benchmark.csv'} "
          f"({sum(len(d) for d in datasets)} samples, {len(datasets)} domains)")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args.config, args.set or [])
    out_dir = config.resolved_out_dir()
    _dump_resolved(config, out_dir)
    datasets = bench.canonical_datasets()
    target = args.target if args.target is not None else sorted(datasets)[-1]
    flags = (config.hp.episodic, config.hp.use_global, config.hp.use_local)
    acc, state, _, _ = harness.run_single(
        config, flags, target, args.seed, datasets,
        metrics_path=out_dir / "metrics.csv", return_state=True)
    ckpt = out_dir / f"ckpt_{state.t}"
    nets.save_params(state.psi, ckpt / "psi.bin")
    nets.save_params(state.theta, ckpt / "theta.bin")
    nets.save_params(state.phi, ckpt / "phi.bin")
    print(f"target {target} accuracy {acc:.4f}; checkpoints in {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    datasets = bench.import_csv(args.data)
    psi = nets.load_params(Path(args.ckpt) / "psi.bin", nets.FEATURE_EXTRACTOR)
    theta = nets.load_params(Path(args.ckpt) / "theta.bin", nets.TASK_NET)
    for ds in datasets:
        acc = harness.evaluate_accuracy(psi, theta, ds)
        print(f"domain {ds.domain_id}: accuracy {acc:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args.config, args.set or [])
    out_dir = config.resolved_out_dir()
    _dump_resolved(config, out_dir)
    report = harness.run_experiment(config)
    for flags, mean, std in report.summary():
        e, g, l = ("x" if v else "-" for v in flags)
        std_s = "n/a" if np.isnan(std) else f"{std:.4f}"
        print(f"episodic {e}  global {g}  local {l}  "
              f"accuracy {mean:.4f} +/- {std_s}")
    print(f"report written to {out_dir / 'report.csv'}")
    return EXIT_OK


def cmd_plot(args) -> int:
    with open(args.metrics, newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    series = {col: [float(r[col]) for r in rows] for col in args.columns}
    harness.write_svg_lines(Path(args.out), series, title=Path(args.metrics).stem)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="masf", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench-gen", help="generate benchmark CSVs")
    p.add_argument("--spec", help="benchmark spec YAML (default: canonical)")
    p.add_argument("--seed", type=int, help="override base seed")
    p.add_argument("--out", default="bench_out")
    p.set_defaults(func=cmd_bench_gen)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", help="experiment config YAML")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", type=int, help="held-out target domain id")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on a dataset CSV")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--config", help="experiment config YAML")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="plot metrics.csv columns to SVG")
    p.add_argument("--metrics", required=True)
    p.add_argument("--columns", nargs="+", default=["task_loss"])
    p.add_argument("--out", default="metrics.svg")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except engine.NonFiniteLossError as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
