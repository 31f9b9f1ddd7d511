"""Command-line entry point.

Subcommands: score-targets, grid-search, run-shadows, audit, report, compare,
config init. Exit codes: 0 success, 2 config error, 3 compute abort, 4 I/O
error.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .attack import read_scores
from .config import DEFAULT_CONFIG_TOML, ConfigError, ExperimentConfig, load_config
from .data import DataError
from .metrics import emit_report, metric_rows, roc_curve, records_to_scores
from .pipeline import (
    ComputeError,
    compare_runs,
    load_chosen_hyper,
    run_audit,
    run_grid_search,
    run_pre_attack,
    run_shadows_only,
)
from .shadow import StoreError
from .training import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COMPUTE = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearn-audit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--jobs", type=int, default=None, help="shadow-round worker count")
        p.add_argument("--seed", type=int, default=None, help="override run.master_seed")
        p.add_argument("--out", default=None, help="override run.out_dir")
        p.add_argument("--resume", action="store_true", help="continue a partial store")

    for name in ("score-targets", "grid-search", "run-shadows", "audit"):
        add_common(sub.add_parser(name))

    report = sub.add_parser("report", help="regenerate metrics and plots from scores.csv")
    report.add_argument("--out", required=True, help="run directory holding scores.csv")

    compare = sub.add_parser("compare", help="side-by-side metrics for several runs")
    compare.add_argument("run_dirs", nargs="+")
    compare.add_argument("--out", default=None, help="write the comparison CSV here")

    config = sub.add_parser("config", help="configuration helpers")
    config_sub = config.add_subparsers(dest="config_command", required=True)
    init = config_sub.add_parser("init", help="print or write the default config")
    init.add_argument("--out", default=None, help="write the TOML here instead of stdout")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if overrides:
        cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, **overrides))
        cfg.validate()
    return cfg


def _cmd_score_targets(args) -> int:
    cfg = _load(args)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = cfg.build_dataset()
    scores = run_pre_attack(cfg, dataset, out, cfg.run.jobs, args.resume)
    counts = {}
    for s in scores:
        counts[s.label] = counts.get(s.label, 0) + 1
    print(f"scored {len(scores)} samples: {counts} -> {out / 'vulnerability.csv'}")
    return EXIT_OK


def _cmd_grid_search(args) -> int:
    cfg = _load(args)
    chosen, rows = run_grid_search(cfg, jobs=cfg.run.jobs, resume=args.resume)
    for row in rows:
        print(f"grid[{row['index']}] {row['method']}: gap={row['gap']:.4f} ({row['status']})")
    print(f"chosen: {chosen}")
    return EXIT_OK


def _cmd_run_shadows(args) -> int:
    cfg = _load(args)
    hyper = load_chosen_hyper(cfg.run.out_dir)
    store = run_shadows_only(cfg, hyper, jobs=cfg.run.jobs, resume=args.resume)
    print(f"shadow store complete: {len(store)} observations")
    return EXIT_OK


def _cmd_audit(args) -> int:
    cfg = _load(args)
    hyper = load_chosen_hyper(cfg.run.out_dir)
    result = run_audit(cfg, hyper, jobs=cfg.run.jobs, resume=args.resume)
    print(f"audited {len(result.records)} targets with {result.hyper.method}")
    for row in result.metric_rows:
        cells = ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "attack")
        print(f"  {row['attack']}: {cells}")
    print(f"artifacts in {result.out_dir}")
    return EXIT_OK


def _cmd_report(args) -> int:
    out = Path(args.out)
    scores_path = out / "scores.csv"
    if not scores_path.exists():
        raise DataError(f"{scores_path}: no scores found; run audit first")
    records, meta = read_scores(scores_path)
    per_attack = records_to_scores(records)
    rocs = {name: roc_curve(s, t) for name, (s, t) in per_attack.items()}
    emit_report(
        records,
        rocs,
        None,
        out,
        meta.get("config_hash", ""),
        int(meta.get("master_seed", 0)),
    )
    for row in metric_rows(rocs, (0.01, 0.05)):
        cells = ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "attack")
        print(f"{row['attack']}: {cells}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    lines, text = compare_runs(args.run_dirs)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _cmd_config(args) -> int:
    if args.config_command == "init":
        if args.out:
            Path(args.out).write_text(DEFAULT_CONFIG_TOML, encoding="utf-8")
            print(f"wrote {args.out}")
        else:
            print(DEFAULT_CONFIG_TOML, end="")
    return EXIT_OK


_COMMANDS = {
    "score-targets": _cmd_score_targets,
    "grid-search": _cmd_grid_search,
    "run-shadows": _cmd_run_shadows,
    "audit": _cmd_audit,
    "report": _cmd_report,
    "compare": _cmd_compare,
    "config": _cmd_config,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, ComputeError) as exc:
        print(f"compute abort: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (StoreError, DataError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
