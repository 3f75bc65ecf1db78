"""Result aggregation: tables with significance columns and SVG figures."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Optional

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "streetnav"
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError, MetricError  # noqa: E402
from .metrics import paired_ttest  # noqa: E402

METRIC_NAMES = ("tc", "spd", "ndtw", "sdtw")
SIGNIFICANCE_LEVEL = 0.05


@dataclass
class RunResult:
    group: str
    seed: int
    path: str
    means: dict


def collect_runs(results_dir: str) -> list[RunResult]:
    """Find every metrics.json under ``results_dir``.

    Group and seed come from a sibling eval_meta.json when present, else
    from the directory name.
    """
    if not os.path.isdir(results_dir):
        raise DataError(f"results directory not found: {results_dir}")
    runs: list[RunResult] = []
    for root, _, files in sorted(os.walk(results_dir)):
        if "metrics.json" not in files:
            continue
        with open(os.path.join(root, "metrics.json"), "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        meta_path = os.path.join(root, "eval_meta.json")
        group = os.path.basename(root)
        seed = len(runs)
        if os.path.exists(meta_path):
            with open(meta_path, "r", encoding="utf-8") as fh:
                meta = json.load(fh)
            group = meta.get("group", group)
            seed = int(meta.get("seed", seed))
        runs.append(RunResult(group=group, seed=seed, path=root, means=payload["means"]))
    if not runs:
        raise DataError(f"no metrics.json files found under {results_dir}")
    return runs


def _mean_std(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


def build_table(
    runs: list[RunResult], baseline: Optional[str] = None
) -> list[dict]:
    """Per-group means/stds plus paired-t p-values against the baseline group."""
    groups: dict[str, list[RunResult]] = {}
    for run in runs:
        groups.setdefault(run.group, []).append(run)
    for members in groups.values():
        members.sort(key=lambda r: r.seed)
    names = sorted(groups)
    if baseline is None:
        baseline = names[0]
    if baseline not in groups:
        raise DataError(f"baseline group {baseline!r} not among {names}")
    base_tc = [r.means["tc"] for r in groups[baseline]]

    rows = []
    for name in names:
        members = groups[name]
        row: dict = {"group": name, "n_runs": len(members)}
        for metric in METRIC_NAMES:
            mean, std = _mean_std([r.means[metric] for r in members])
            row[f"{metric}_mean"] = mean
            row[f"{metric}_std"] = std
        p_value: Optional[float] = None
        if name != baseline and len(members) == len(base_tc) and len(members) >= 2:
            try:
                _, p_value = paired_ttest([r.means["tc"] for r in members], base_tc)
            except MetricError:
                p_value = None
        row["p_tc_vs_baseline"] = p_value
        row["significant"] = bool(p_value is not None and p_value <= SIGNIFICANCE_LEVEL)
        rows.append(row)
    return rows


def write_table_csv(rows: list[dict], path: str) -> None:
    with_significance = any(r["p_tc_vs_baseline"] is not None for r in rows)
    fields = ["group", "n_runs"]
    for metric in METRIC_NAMES:
        fields += [f"{metric}_mean", f"{metric}_std"]
    if with_significance:
        fields += ["p_tc_vs_baseline", "significant"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key, val in out.items():
                if isinstance(val, float):
                    out[key] = f"{val:.6f}"
            if out.get("p_tc_vs_baseline") is None:
                out["p_tc_vs_baseline"] = ""
            writer.writerow(out)


def _save_fig(fig, path: str) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_group_tc(rows: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(rows)), 3.2))
    xs = range(len(rows))
    ax.bar(
        xs,
        [r["tc_mean"] for r in rows],
        yerr=[r["tc_std"] for r in rows],
        color="#4878a8",
        capsize=3,
    )
    ax.set_xticks(list(xs))
    ax.set_xticklabels([r["group"] for r in rows], rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("task completion")
    fig.tight_layout()
    _save_fig(fig, path)


def plot_mask_curves(curve_csvs: list[str], path: str) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for csv_path in sorted(curve_csvs):
        ks, tcs, kind = [], [], os.path.basename(csv_path)
        with open(csv_path, "r", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                ks.append(int(row["k"]))
                tcs.append(float(row["tc"]))
                kind = row["kind"]
        ax.plot(ks, tcs, marker="o", label=f"masked {kind} tokens")
    ax.set_xlabel("masked lexicon size k")
    ax.set_ylabel("task completion")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save_fig(fig, path)


def generate_report(results_dir: str, out_dir: str, baseline: Optional[str] = None) -> list[dict]:
    runs = collect_runs(results_dir)
    rows = build_table(runs, baseline)
    os.makedirs(out_dir, exist_ok=True)
    write_table_csv(rows, os.path.join(out_dir, "results.csv"))
    plot_group_tc(rows, os.path.join(out_dir, "figure_tc.svg"))
    curves = []
    for root, _, files in sorted(os.walk(results_dir)):
        curves += [os.path.join(root, f) for f in files if f.startswith("mask_curve_")]
    if curves:
        plot_mask_curves(curves, os.path.join(out_dir, "figure_masking.svg"))
    return rows
