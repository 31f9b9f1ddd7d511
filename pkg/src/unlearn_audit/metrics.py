"""Attack metrics (ROC, AUC, TPR at fixed FPR, best balanced accuracy),
accuracy-gap tables against the retrain oracle, a two-sample
Kolmogorov-Smirnov helper, and deterministic CSV/SVG report emission.

AUC is computed from grouped integer tie counts, so it agrees exactly with a
pairwise-counting oracle (ties worth 1/2). TPR@FPR uses the conservative
step-function convention: no interpolation between thresholds.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, DataPartition
from .models import ModelSpec, ParamVector
from .training import accuracy


@dataclass(frozen=True)
class RocCurve:
    """Tie-grouped ROC: one point per distinct threshold, plus (0, 0)."""

    fprs: np.ndarray
    tprs: np.ndarray
    thresholds: np.ndarray  # score cutoffs; point k admits scores >= thresholds[k]
    num_pos: int
    num_neg: int
    fp_counts: np.ndarray
    tp_counts: np.ndarray


def roc_curve(scores, truths) -> RocCurve:
    """ROC over real-valued scores; ``truths`` marks the positive class."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=bool)
    num_pos = int(truths.sum())
    num_neg = int(len(truths) - num_pos)
    if num_pos == 0 or num_neg == 0:
        raise ValueError("roc_curve needs both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_truth = truths[order]
    distinct = np.flatnonzero(np.diff(sorted_scores)) if len(scores) > 1 else np.array([], int)
    group_ends = np.append(distinct, len(scores) - 1)
    tp = np.cumsum(sorted_truth)[group_ends]
    fp = group_ends + 1 - tp
    return RocCurve(
        fprs=np.concatenate([[0.0], fp / num_neg]),
        tprs=np.concatenate([[0.0], tp / num_pos]),
        thresholds=np.concatenate([[np.inf], sorted_scores[group_ends]]),
        num_pos=num_pos,
        num_neg=num_neg,
        fp_counts=np.concatenate([[0], fp]).astype(np.int64),
        tp_counts=np.concatenate([[0], tp]).astype(np.int64),
    )


def auc(roc: RocCurve) -> float:
    """Trapezoid area from integer counts; ties contribute exactly 1/2."""
    dfp = np.diff(roc.fp_counts)
    tp_sum = roc.tp_counts[1:] + roc.tp_counts[:-1]
    return float((dfp * tp_sum).sum() / (2.0 * roc.num_pos * roc.num_neg))


def tpr_at_fpr(roc: RocCurve, fpr_target: float) -> float:
    """TPR at the largest threshold whose FPR does not exceed the target."""
    if not 0.0 < fpr_target < 1.0:
        raise ValueError("fpr_target must be in (0, 1)")
    admissible = roc.fprs <= fpr_target
    return float(roc.tprs[admissible][-1])


def attack_accuracy(scores, truths) -> float:
    """Best balanced accuracy over all score thresholds."""
    roc = roc_curve(scores, truths)
    return float(((roc.tprs + 1.0 - roc.fprs) / 2.0).max())


def two_sample_ks(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic (max ECDF gap)."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / len(a)
    cdf_b = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.abs(cdf_a - cdf_b).max())


def ks_critical(n: int, m: int, alpha: float = 0.05) -> float:
    """Large-sample critical value c(alpha) * sqrt((n+m)/(n*m))."""
    coefficients = {0.10: 1.224, 0.05: 1.358, 0.025: 1.48, 0.01: 1.628}
    if alpha not in coefficients:
        raise ValueError(f"no tabulated coefficient for alpha={alpha}")
    return coefficients[alpha] * np.sqrt((n + m) / (n * m))


# ---------------------------------------------------------------------------
# accuracy-gap report


@dataclass(frozen=True)
class GapRow:
    method: str
    acc_forget: float
    acc_remain: float
    acc_test: float
    acc_vulnerable_remain: float | None
    delta_forget: float
    delta_remain: float
    delta_test: float
    delta_vulnerable_remain: float | None
    unintended_forgetting: bool


@dataclass(frozen=True)
class GapReport:
    rows: tuple[GapRow, ...]
    margin: float


def gap_report(
    models: dict[str, ParamVector],
    spec: ModelSpec,
    dataset: Dataset,
    partition: DataPartition,
    test_ids,
    vulnerable_ids,
    margin: float = 0.05,
) -> GapReport:
    """Accuracy table versus the retrain oracle, with a vulnerable-remain
    column flagging methods that collaterally forget retained samples."""
    if "retrain" not in models:
        raise ValueError("gap report needs a 'retrain' row")
    vul_remain = sorted(set(vulnerable_ids) & partition.remain_ids)

    def row_accs(params: ParamVector):
        forget = accuracy(spec, params, dataset, partition.forget_ids) if partition.forget_ids else float("nan")
        remain = accuracy(spec, params, dataset, partition.remain_ids)
        test = accuracy(spec, params, dataset, test_ids)
        vul = accuracy(spec, params, dataset, vul_remain) if vul_remain else None
        return forget, remain, test, vul

    base = row_accs(models["retrain"])
    rows = []
    for method in sorted(models, key=lambda m: (m == "retrain", m)):
        accs = row_accs(models[method])
        deltas = tuple(
            None if a is None or b is None else a - b for a, b in zip(accs, base)
        )
        flagged = deltas[3] is not None and deltas[3] < -margin
        rows.append(GapRow(method, *accs, *deltas, unintended_forgetting=flagged))
    return GapReport(tuple(rows), margin)


# ---------------------------------------------------------------------------
# CSV emission


def write_roc_csv(path: str | Path, roc: RocCurve, config_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash} num_pos={roc.num_pos} num_neg={roc.num_neg}\n")
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        for f, t, thr in zip(roc.fprs, roc.tprs, roc.thresholds):
            writer.writerow([repr(float(f)), repr(float(t)), repr(float(thr))])


def read_roc_csv(path: str | Path) -> RocCurve:
    with open(path, newline="", encoding="utf-8") as fh:
        header = fh.readline().strip()
        meta = dict(p.split("=", 1) for p in header.lstrip("# ").split(" ") if "=" in p)
        reader = csv.DictReader(fh)
        fprs, tprs, thresholds = [], [], []
        for row in reader:
            fprs.append(float(row["fpr"]))
            tprs.append(float(row["tpr"]))
            thresholds.append(float(row["threshold"]))
    num_pos, num_neg = int(meta["num_pos"]), int(meta["num_neg"])
    fprs_arr = np.array(fprs)
    tprs_arr = np.array(tprs)
    return RocCurve(
        fprs_arr,
        tprs_arr,
        np.array(thresholds),
        num_pos,
        num_neg,
        np.rint(fprs_arr * num_neg).astype(np.int64),
        np.rint(tprs_arr * num_pos).astype(np.int64),
    )


def write_metrics_csv(path: str | Path, rows: list[dict], fpr_points, config_hash: str) -> None:
    columns = ["attack", "auc", "attack_acc"] + [f"tpr_at_{p:g}" for p in fpr_points]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_metrics_csv(path: str | Path) -> tuple[list[dict], str]:
    with open(path, newline="", encoding="utf-8") as fh:
        header = fh.readline().strip()
        meta = dict(p.split("=", 1) for p in header.lstrip("# ").split(" ") if "=" in p)
        rows = [dict(r) for r in csv.DictReader(fh)]
    return rows, meta.get("config_hash", "")


def write_gaps_csv(path: str | Path, report: GapReport, config_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash} margin={report.margin!r}\n")
        writer = csv.writer(fh)
        writer.writerow(
            [
                "method",
                "acc_forget",
                "acc_remain",
                "acc_test",
                "acc_vulnerable_remain",
                "delta_forget",
                "delta_remain",
                "delta_test",
                "delta_vulnerable_remain",
                "unintended_forgetting",
            ]
        )
        for r in report.rows:
            writer.writerow(
                [
                    r.method,
                    repr(r.acc_forget),
                    repr(r.acc_remain),
                    repr(r.acc_test),
                    "" if r.acc_vulnerable_remain is None else repr(r.acc_vulnerable_remain),
                    repr(r.delta_forget),
                    repr(r.delta_remain),
                    repr(r.delta_test),
                    "" if r.delta_vulnerable_remain is None else repr(r.delta_vulnerable_remain),
                    int(r.unintended_forgetting),
                ]
            )


ATTACK_SCORE_FIELDS = {
    "leakage": "leakage",
    "efficacy": "efficacy",
    "ulira": "ulira",
    "population": "population",
}


def records_to_scores(records) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-attack (scores, truth bits) arrays from score records.

    Ratio tests are mapped through log; every downstream metric is invariant
    under monotone transforms, so this only affects plotting scales.
    """
    out = {}
    if not records:
        return out
    truth = np.array([r.truth == "unlearned" for r in records])
    for attack, field in ATTACK_SCORE_FIELDS.items():
        raw = np.array([getattr(r, field) for r in records], dtype=np.float64)
        scores = np.log(np.maximum(raw, 1e-300)) if attack != "population" else raw
        out[attack] = (scores, truth)
    return out


def metric_rows(rocs: dict[str, RocCurve], fpr_points) -> list[dict]:
    rows = []
    for attack in sorted(rocs):
        roc = rocs[attack]
        row = {
            "attack": attack,
            "auc": auc(roc),
            "attack_acc": float(((roc.tprs + 1.0 - roc.fprs) / 2.0).max()),
        }
        for p in fpr_points:
            row[f"tpr_at_{p:g}"] = tpr_at_fpr(roc, p)
        rows.append(row)
    return rows


def emit_report(
    records,
    rocs: dict[str, RocCurve],
    gaps: GapReport | None,
    out_dir: str | Path,
    config_hash: str,
    master_seed: int,
    fpr_points=(0.01, 0.05),
) -> list[Path]:
    """Write the run's score, ROC, metric and gap CSVs plus SVG plots.

    Empty records produce header-only CSVs and no plots.
    """
    from .attack import write_scores

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    scores_path = out / "scores.csv"
    write_scores(scores_path, list(records), config_hash, master_seed)
    files.append(scores_path)

    for attack in sorted(rocs):
        p = out / f"roc_{attack}.csv"
        write_roc_csv(p, rocs[attack], config_hash)
        files.append(p)

    metrics_path = out / "metrics.csv"
    write_metrics_csv(metrics_path, metric_rows(rocs, fpr_points), fpr_points, config_hash)
    files.append(metrics_path)

    if gaps is not None:
        gaps_path = out / "gaps.csv"
        write_gaps_csv(gaps_path, gaps, config_hash)
        files.append(gaps_path)

    if rocs:
        roc_svg = out / "roc_loglog.svg"
        svg_roc_loglog(rocs, roc_svg, config_hash)
        files.append(roc_svg)
    per_attack = records_to_scores(list(records))
    for attack, (scores, truth) in sorted(per_attack.items()):
        if truth.all() or not truth.any():
            continue
        hist_path = out / f"hist_{attack}.svg"
        svg_histogram(
            {"unlearned": scores[truth], "held-out": scores[~truth]}, hist_path, config_hash
        )
        files.append(hist_path)
    return files


# ---------------------------------------------------------------------------
# SVG plots (hand-rolled for byte-deterministic output)

_SVG_W, _SVG_H = 640, 480
_MARGIN = 60
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_LOG_FLOOR = 1e-3


def _log_xy(v: float, lo_exp: int = -3) -> float:
    """Map [10^lo_exp, 1] to [0, 1] on a log axis, clipping below the floor."""
    v = max(v, 10.0**lo_exp)
    return (np.log10(v) - lo_exp) / (0 - lo_exp)


def svg_roc_loglog(curves: dict[str, RocCurve], path: str | Path, config_hash: str) -> None:
    """Log-log ROC plot over [1e-3, 1] on both axes, one polyline per attack."""
    inner_w = _SVG_W - 2 * _MARGIN
    inner_h = _SVG_H - 2 * _MARGIN

    def px(fx: float) -> float:
        return _MARGIN + fx * inner_w

    def py(fy: float) -> float:
        return _SVG_H - _MARGIN - fy * inner_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}">',
        f"<!-- config_hash={config_hash} -->",
        f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{inner_w}" height="{inner_h}" '
        'fill="white" stroke="black"/>',
    ]
    for exp in range(-3, 1):
        tick = 10.0**exp
        x = px(_log_xy(tick))
        y = py(_log_xy(tick))
        label = f"1e{exp}" if exp < 0 else "1"
        parts.append(
            f'<line x1="{x:.2f}" y1="{_MARGIN}" x2="{x:.2f}" y2="{_SVG_H - _MARGIN}" '
            'stroke="#cccccc" stroke-width="0.5"/>'
        )
        parts.append(
            f'<line x1="{_MARGIN}" y1="{y:.2f}" x2="{_SVG_W - _MARGIN}" y2="{y:.2f}" '
            'stroke="#cccccc" stroke-width="0.5"/>'
        )
        parts.append(
            f'<text x="{x:.2f}" y="{_SVG_H - _MARGIN + 16}" font-size="11" '
            f'text-anchor="middle">{label}</text>'
        )
        parts.append(
            f'<text x="{_MARGIN - 6}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{label}</text>'
        )
    diag = [(px(_log_xy(v)), py(_log_xy(v))) for v in (10.0**e for e in (-3, 0))]
    parts.append(
        f'<line x1="{diag[0][0]:.2f}" y1="{diag[0][1]:.2f}" x2="{diag[1][0]:.2f}" '
        f'y2="{diag[1][1]:.2f}" stroke="#888888" stroke-dasharray="4 3"/>'
    )
    for k, (name, roc) in enumerate(sorted(curves.items())):
        pts = " ".join(
            f"{px(_log_xy(max(f, _LOG_FLOOR))):.2f},{py(_log_xy(max(t, _LOG_FLOOR))):.2f}"
            for f, t in zip(roc.fprs, roc.tprs)
        )
        color = _PALETTE[k % len(_PALETTE)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{_MARGIN + 8}" y="{_MARGIN + 16 + 14 * k}" font-size="12" '
            f'fill="{color}">{name}</text>'
        )
    parts.append(
        f'<text x="{_SVG_W / 2:.0f}" y="{_SVG_H - 12}" font-size="12" '
        'text-anchor="middle">false positive rate</text>'
    )
    parts.append(
        f'<text x="14" y="{_SVG_H / 2:.0f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {_SVG_H / 2:.0f})">true positive rate</text>'
    )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def svg_histogram(groups: dict[str, np.ndarray], path: str | Path, config_hash: str, bins: int = 30) -> None:
    """Overlaid score histograms per truth class, fixed layout."""
    all_values = np.concatenate([np.asarray(v, dtype=np.float64) for v in groups.values()])
    lo, hi = float(all_values.min()), float(all_values.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    inner_w = _SVG_W - 2 * _MARGIN
    inner_h = _SVG_H - 2 * _MARGIN
    counts = {name: np.histogram(np.asarray(v), bins=edges)[0] for name, v in groups.items()}
    peak = max(1, max(c.max() for c in counts.values()))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}">',
        f"<!-- config_hash={config_hash} -->",
        f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{inner_w}" height="{inner_h}" '
        'fill="white" stroke="black"/>',
    ]
    bar_w = inner_w / bins
    for k, name in enumerate(sorted(counts)):
        color = _PALETTE[k % len(_PALETTE)]
        for j, c in enumerate(counts[name]):
            if c == 0:
                continue
            h = inner_h * (c / peak)
            x = _MARGIN + j * bar_w + k * bar_w / max(len(counts), 1) / 2
            parts.append(
                f'<rect x="{x:.2f}" y="{_SVG_H - _MARGIN - h:.2f}" width="{bar_w / 2:.2f}" '
                f'height="{h:.2f}" fill="{color}" fill-opacity="0.55"/>'
            )
        parts.append(
            f'<text x="{_MARGIN + 8}" y="{_MARGIN + 16 + 14 * k}" font-size="12" '
            f'fill="{color}">{name}</text>'
        )
    parts.append(
        f'<text x="{_SVG_W / 2:.0f}" y="{_SVG_H - 12}" font-size="12" '
        f'text-anchor="middle">signal value ({lo:.3g} to {hi:.3g})</text>'
    )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
