"""Render run artifacts into figures and delimited tables.

Reads only the files earlier stages wrote, so it can be re-run on any
completed run directory. Figures go to PNG, the numbers behind them to CSV
alongside.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib import colors  # noqa: E402

import numpy as np  # noqa: E402

from .core import read_raster  # noqa: E402
from .gridder import read_grid  # noqa: E402

_CLASS_CMAP = colors.ListedColormap(["#d9d9d9", "#e08214", "#1b7837"])
_CLASS_NORM = colors.BoundaryNorm([-0.5, 0.5, 1.5, 2.5], _CLASS_CMAP.N)


def _save(fig, path: Path):
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    return path


def monthly_tall_fraction(run: Path, out_dir: Path) -> list:
    cells = read_grid(run / "grid" / "cells.jsonl")
    csv_path = out_dir / "monthly_tall_fraction.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell_id", "month", "n_short", "n_tall", "n_tree",
                         "tall_fraction", "optimal"])
        for cell in cells:
            for month in range(1, 13):
                s, t, tr = cell.monthly_hist.counts[month - 1]
                fraction = cell.monthly_hist.tall_fraction(month)
                writer.writerow([cell.cell_id, month, s, t, tr,
                                 "" if fraction is None else f"{fraction:.4f}",
                                 int(month == cell.optimal_month)])
    fig, axes = plt.subplots(1, max(len(cells), 1), figsize=(4.2 * max(len(cells), 1), 3.2),
                             squeeze=False, sharey=True)
    for ax, cell in zip(axes[0], cells):
        months = np.arange(1, 13)
        fractions = [cell.monthly_hist.tall_fraction(m) or 0.0 for m in months]
        bar_colors = ["#e08214" if m == cell.optimal_month else "#878787" for m in months]
        ax.bar(months, fractions, color=bar_colors)
        ax.set_title(f"cell {cell.cell_id}")
        ax.set_xlabel("month")
        ax.set_xticks(months[::2])
    axes[0][0].set_ylabel("tall shot fraction")
    fig.suptitle("Tall-shot fraction by month (optimal month highlighted)")
    return [_save(fig, out_dir / "monthly_tall_fraction.png"), csv_path]


def view_angle_timeline(run: Path, out_dir: Path) -> list:
    with open(run / "filtered" / "beam_day_angles.json", "r", encoding="utf-8") as fh:
        rows = json.load(fh)
    csv_path = out_dir / "beam_day_angles.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", "beam", "mean_angle_rad", "count"])
        for row in rows:
            writer.writerow([row["date"], row["beam"],
                             f"{row['mean_angle']:.6f}", row["count"]])
    by_date: dict = {}
    for row in rows:
        by_date.setdefault(row["date"], []).append(row["mean_angle"])
    dates = sorted(by_date)
    means = [float(np.mean(by_date[d])) for d in dates]
    lo = [min(by_date[d]) for d in dates]
    hi = [max(by_date[d]) for d in dates]
    x = np.arange(len(dates))
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.fill_between(x, lo, hi, alpha=0.3, color="#4393c3", label="beam range")
    ax.plot(x, means, color="#2166ac", lw=1.2, label="daily mean")
    ax.axhline(1.5, color="#b2182b", ls="--", lw=1, label="cut-off 1.5 rad")
    step = max(1, len(dates) // 8)
    ax.set_xticks(x[::step])
    ax.set_xticklabels([dates[i] for i in range(0, len(dates), step)],
                       rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("view angle (rad)")
    ax.legend(fontsize=7)
    fig.suptitle("Beam-day mean view angle")
    return [_save(fig, out_dir / "view_angle.png"), csv_path]


def class_maps(run: Path, out_dir: Path, years: list) -> list:
    outputs = []
    truth_path = run / "scene" / "truth.asc"
    truth = read_raster(truth_path) if truth_path.exists() else None
    for year in years:
        mosaic = read_raster(run / "mosaic" / f"mosaic_y{year}.asc")
        n_panels = 2 if truth is not None else 1
        fig, axes = plt.subplots(1, n_panels, figsize=(4.5 * n_panels, 4.2), squeeze=False)
        panels = [("predicted", mosaic.values)]
        if truth is not None:
            panels.append(("reference", truth.values))
        for ax, (title, values) in zip(axes[0], panels):
            shown = np.ma.masked_where(values < 0, values)
            ax.imshow(shown, cmap=_CLASS_CMAP, norm=_CLASS_NORM, interpolation="nearest")
            ax.set_title(f"{title} {year}")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.suptitle("Short (gray) / tall (orange) / tree (green)")
        outputs.append(_save(fig, out_dir / f"class_map_y{year}.png"))
    return outputs


def recall_by_gcvi(run: Path, out_dir: Path, years: list) -> list:
    with open(run / "eval" / "eval_report.json", "r", encoding="utf-8") as fh:
        report = json.load(fh)
    csv_path = out_dir / "recall_by_gcvi.csv"
    rows = []
    for year in years:
        block = report["years"][str(year)]["recall_by_peak_gcvi"]
        edges = block["bin_edges"]
        labels = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            lo_s = "-inf" if lo is None else f"{lo:g}"
            hi_s = "inf" if hi is None else f"{hi:g}"
            labels.append(f"({lo_s}, {hi_s}]")
        for label, recall, count in zip(labels, block["recall"],
                                        block["tall_reference_counts"]):
            rows.append([year, label, "" if recall is None else f"{recall:.4f}", count])
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["year", "peak_gcvi_bin", "tall_recall", "n_tall_reference"])
        writer.writerows(rows)
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    year = years[0]
    block = report["years"][str(year)]["recall_by_peak_gcvi"]
    values = [r if r is not None else 0.0 for r in block["recall"]]
    labels = [row[1] for row in rows[:len(values)]]
    ax.bar(np.arange(len(values)), values, color="#5aae61")
    ax.set_xticks(np.arange(len(values)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("tall recall")
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("peak GCVI bin")
    fig.suptitle(f"Tall recall by peak GCVI, {year}")
    return [_save(fig, out_dir / "recall_by_gcvi.png"), csv_path]


def aggregation_scatter(run: Path, out_dir: Path, years: list) -> list:
    outputs = []
    csv_path = out_dir / "aggregation.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["year", "coarse_row", "coarse_col",
                         "reference_fraction", "predicted_fraction"])
        for year in years:
            pred_path = run / "agg" / f"tall_fraction_y{year}.asc"
            truth_path = run / "agg" / f"truth_fraction_y{year}.asc"
            if not truth_path.exists():
                continue
            pred = read_raster(pred_path)
            truth = read_raster(truth_path)
            both = pred.valid_mask() & truth.valid_mask()
            rows_idx, cols_idx = np.nonzero(both)
            for r, c in zip(rows_idx, cols_idx):
                writer.writerow([year, r, c, f"{truth.values[r, c]:.4f}",
                                 f"{pred.values[r, c]:.4f}"])
            fig, ax = plt.subplots(figsize=(3.8, 3.8))
            ax.scatter(truth.values[both], pred.values[both], s=12, alpha=0.6,
                       color="#2166ac", edgecolors="none")
            ax.plot([0, 1], [0, 1], color="#b2182b", lw=0.8, ls="--")
            ax.set_xlabel("reference tall fraction")
            ax.set_ylabel("predicted tall fraction")
            ax.set_xlim(-0.02, 1.02)
            ax.set_ylim(-0.02, 1.02)
            fig.suptitle(f"Coarse-cell tall fraction, {year}")
            outputs.append(_save(fig, out_dir / f"aggregation_scatter_y{year}.png"))
    outputs.append(csv_path)
    return outputs


def metrics_table(run: Path, out_dir: Path, years: list) -> list:
    with open(run / "eval" / "eval_report.json", "r", encoding="utf-8") as fh:
        report = json.load(fh)
    csv_path = out_dir / "metrics_summary.csv"
    columns = ["accuracy", "f1_short", "f1_tall", "precision_short", "precision_tall",
               "recall_short", "recall_tall", "kappa"]
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["year", "model"] + columns)
        for year in years:
            block = report["years"][str(year)]
            for name, metrics in (("gedi_s2", block["gedi_s2"]["metrics"]),
                                  ("s2_local", block["s2_local"]["mean_metrics"])):
                writer.writerow([year, name] + [
                    "" if metrics[c] is None else f"{metrics[c]:.4f}" for c in columns])
    return [csv_path]


def render_all(cfg) -> list:
    from .pipeline import RunPaths, _scene_manifest

    paths = RunPaths(cfg.out)
    paths.report.mkdir(parents=True, exist_ok=True)
    years = [int(y) for y in _scene_manifest(paths)["years"]]
    outputs = []
    outputs += monthly_tall_fraction(paths.out, paths.report)
    outputs += view_angle_timeline(paths.out, paths.report)
    outputs += class_maps(paths.out, paths.report, years)
    outputs += recall_by_gcvi(paths.out, paths.report, years)
    outputs += aggregation_scatter(paths.out, paths.report, years)
    outputs += metrics_table(paths.out, paths.report, years)
    return outputs
