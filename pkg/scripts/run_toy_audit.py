"""Run the full classification-track audit on the synthetic blob benchmark.

Scores targets, grid-searches the unlearning hyperparameters, runs the shadow
rounds and writes the per-sample score files and report into --out.

Usage:
    python scripts/run_toy_audit.py --method ga_plus --seed 7 --out runs/toy
"""
import argparse
import dataclasses
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from unlearn_audit.config import ExperimentConfig, UnlearnConfig, RunConfig
from unlearn_audit.pipeline import run_audit, run_grid_search

METHOD_GRIDS = {
    "identity": ({},),
    "retrain": ({},),
    "finetune": ({"learning_rate": 0.05, "refine_epochs": 2},),
    "ga_plus": (
        {"learning_rate": 0.05, "ascent_steps": 8, "refine_epochs": 1},
        {"learning_rate": 0.1, "ascent_steps": 16, "refine_epochs": 1},
    ),
    "neggrad_plus": (
        {"learning_rate": 0.1, "alpha": 0.35, "ascent_steps": 40},
        {"learning_rate": 0.1, "alpha": 0.5, "ascent_steps": 60},
    ),
    "l1_sparse": (
        {"learning_rate": 0.05, "sparsity": 0.3, "refine_epochs": 2},
        {"learning_rate": 0.05, "sparsity": 0.6, "refine_epochs": 2},
    ),
    "scrub": (
        {"learning_rate": 0.05, "max_steps": 2, "min_steps": 4},
        {"learning_rate": 0.1, "max_steps": 4, "min_steps": 6},
    ),
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--method", default="ga_plus", choices=sorted(METHOD_GRIDS))
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out", default=None)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--skip-grid", action="store_true", help="use the first grid entry")
    args = parser.parse_args()

    out = args.out or f"runs/toy_{args.method}_seed{args.seed}"
    cfg = ExperimentConfig(
        unlearn=UnlearnConfig(method=args.method, grid=METHOD_GRIDS[args.method]),
        run=RunConfig(master_seed=args.seed, out_dir=out, jobs=args.jobs),
    )
    hyper = None
    if not args.skip_grid and len(cfg.grid_hypers()) > 1:
        hyper, rows = run_grid_search(cfg)
        for row in rows:
            print(f"grid[{row['index']}] gap={row['gap']:.4f} ({row['status']})")
    result = run_audit(cfg, hyper, resume=True)
    print(f"\n{args.method} audit over {len(result.records)} targets "
          f"({result.elapsed_seconds:.1f}s):")
    for row in result.metric_rows:
        cells = ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "attack")
        print(f"  {row['attack']:10s} {cells}")
    print(f"artifacts: {result.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
