"""Run the sequence-track audit: unlearning memorized n-grams from the tiny
next-token model, audited with the loss signal.

Usage:
    python scripts/run_sequence_audit.py --method ga_gdr --seed 7
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from unlearn_audit.config import (
    DatasetConfig,
    ExperimentConfig,
    ModelConfig,
    RunConfig,
    TargetsConfig,
    TrainingConfig,
    UnlearnConfig,
)
from unlearn_audit.pipeline import run_audit

METHOD_GRIDS = {
    "identity": ({},),
    "retrain": ({},),
    "ga_gdr": ({"learning_rate": 0.2, "ascent_steps": 30, "refine_epochs": 1},),
    "npo": ({"learning_rate": 0.2, "ascent_steps": 40, "beta": 1.0, "refine_epochs": 1},),
}


def sequence_config(method: str, seed: int, out: str, jobs: int) -> ExperimentConfig:
    return ExperimentConfig(
        dataset=DatasetConfig(kind="sequences", num_records=500, vocab=64,
                              record_len=12, ngram_len=7),
        model=ModelConfig(kind="token-lm", hidden_dim=16, context_window=5),
        training=TrainingConfig(epochs=7, batch_size=16, learning_rate=0.5,
                                momentum=0.9, weight_decay=0.0),
        targets=TargetsConfig(mode="random", num_targets=120, num_retained=0,
                              num_fillers=30, pre_attack_models=6),
        unlearn=UnlearnConfig(method=method, grid=METHOD_GRIDS[method]),
        run=RunConfig(master_seed=seed, out_dir=out, jobs=jobs),
    )


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--method", default="ga_gdr", choices=sorted(METHOD_GRIDS))
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out", default=None)
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()

    out = args.out or f"runs/seq_{args.method}_seed{args.seed}"
    cfg = sequence_config(args.method, args.seed, out, args.jobs)
    result = run_audit(cfg, resume=True)
    print(f"\n{args.method} sequence audit over {len(result.records)} targets "
          f"({result.elapsed_seconds:.1f}s):")
    for row in result.metric_rows:
        cells = ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "attack")
        print(f"  {row['attack']:10s} {cells}")
    print(f"artifacts: {result.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
