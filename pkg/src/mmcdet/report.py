"""Join metric CSVs from many runs into one comparison table, and plot them.

The join is a pure function of the input files.  Figures are written with
matplotlib's Agg backend next to the joined CSV.
"""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from .attack import ATTACK_COLUMNS
from .config import VARIANTS
from .corruptions import KINDS, SWEEP_COLUMNS
from .evaluate import REPORT_COLUMNS, SPLITS

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("variant", "split", "mAP", "F1", "n_runs")


def read_table(path) -> tuple[str | None, list[dict]]:
    """Rows of a metrics CSV and its kind: ``eval``, ``sweep``, ``attack`` or None."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        rows = list(reader)
    kinds = {REPORT_COLUMNS: "eval", SWEEP_COLUMNS: "sweep", ATTACK_COLUMNS: "attack"}
    return kinds.get(header), rows


def _variant_key(v: str):
    return (VARIANTS.index(v) if v in VARIANTS else len(VARIANTS), v)


def summarize(eval_rows: list[dict]) -> list[list]:
    """One row per (variant, split): run-averaged mean-class mAP and F1."""
    acc = defaultdict(list)
    for r in eval_rows:
        if r["class"] == "mean":
            acc[(r["variant"], r["split"])].append((r["run_id"], float(r["AP"]), float(r["F1"])))
    out = []
    for variant, split in sorted(acc, key=lambda k: (_variant_key(k[0]), _split_key(k[1]))):
        vals = acc[(variant, split)]
        out.append([variant, split, f"{np.mean([v[1] for v in vals]):.6f}",
                    f"{np.mean([v[2] for v in vals]):.6f}", len({v[0] for v in vals})])
    return out


def _split_key(s: str):
    return (SPLITS.index(s) if s in SPLITS else len(SPLITS), s)


def write_summary(path, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(rows)


def _write_rows(path, columns, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, columns)
        w.writeheader()
        w.writerows(rows)


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_summary(path, rows: list[list]) -> None:
    plt = _plt()
    variants = list(dict.fromkeys(r[0] for r in rows))
    splits = sorted({r[1] for r in rows}, key=_split_key)
    val = {(r[0], r[1]): float(r[2]) * 100 for r in rows}
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(variants)), 3.5))
    width = 0.8 / max(1, len(splits))
    for j, s in enumerate(splits):
        xs = np.arange(len(variants)) + (j - (len(splits) - 1) / 2) * width
        ax.bar(xs, [val.get((v, s), np.nan) for v in variants], width, label=s)
    ax.set_xticks(np.arange(len(variants)), variants, rotation=30, ha="right")
    ax.set_ylabel("mAP@0.5 (%)")
    ax.legend(title="split")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_sweep(path, rows: list[dict], split: str = "all") -> None:
    plt = _plt()
    runs = list(dict.fromkeys(r["run_id"] for r in rows))
    names = ["clean"] + [k for k in KINDS if any(r["corruption"] == k for r in rows)]
    val = {(r["run_id"], r["corruption"]): float(r["mAP"]) * 100 for r in rows if r["split"] == split}
    fig, ax = plt.subplots(figsize=(10, 3.5))
    width = 0.8 / max(1, len(runs))
    for j, run in enumerate(runs):
        xs = np.arange(len(names)) + (j - (len(runs) - 1) / 2) * width
        ax.bar(xs, [val.get((run, n), np.nan) for n in names], width, label=run or "run")
    ax.set_xticks(np.arange(len(names)), names, rotation=45, ha="right")
    ax.set_ylabel(f"mAP@0.5 (%), {split}")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_attack(path, rows: list[dict]) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    groups = defaultdict(list)
    for r in rows:
        groups[(r["run_id"], r["hidden_class"])].append((float(r["epsilon"]) * 255, float(r["hidden_class_recall"])))
    for (run, cls), pts in groups.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{run or 'run'} (class {cls})")
    ax.set_xlabel("epsilon (x 1/255)")
    ax.set_ylabel("hidden-class recall")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def build_report(paths, out_dir, figures: bool = True) -> dict[str, Path]:
    """Join every CSV in ``paths``; returns the files written, keyed by role."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = defaultdict(list)
    for p in paths:
        kind, rows = read_table(p)
        if kind is None:
            log.warning("skipping %s: not an eval, corrupt or attack table", p)
            continue
        tables[kind].extend(rows)
    if not tables:
        raise ValueError("no metric CSVs among the inputs")
    written = {}
    if tables["eval"]:
        rows = summarize(tables["eval"])
        written["summary"] = out_dir / "summary.csv"
        write_summary(written["summary"], rows)
        if figures:
            written["summary_png"] = out_dir / "summary.png"
            plot_summary(written["summary_png"], rows)
    if tables["sweep"]:
        written["corruption"] = out_dir / "corruption.csv"
        _write_rows(written["corruption"], SWEEP_COLUMNS, tables["sweep"])
        if figures:
            written["corruption_png"] = out_dir / "corruption.png"
            plot_sweep(written["corruption_png"], tables["sweep"])
    if tables["attack"]:
        written["attack"] = out_dir / "attack.csv"
        _write_rows(written["attack"], ATTACK_COLUMNS, tables["attack"])
        if figures:
            written["attack_png"] = out_dir / "attack.png"
            plot_attack(written["attack_png"], tables["attack"])
    return written
