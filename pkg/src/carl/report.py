"""Loss-curve and mAP-by-polyphony plots, terminal tables and CSV export over run directories."""

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import fmt, render_table  # noqa: E402

COLUMNS = ("all", "p1", "p2", "p3")
CURVE_FILES = ("losses.csv", "losses_probe.csv")


def find_runs(paths):
    """Run directories (those holding ``run.json``) under each path, sorted."""
    found = []
    for p in paths:
        for root, _, files in os.walk(p):
            if "run.json" in files:
                found.append(root)
    return sorted(set(found))


def load_run(run_dir):
    with open(os.path.join(run_dir, "run.json")) as fh:
        run = json.load(fh)
    run["dir"] = run_dir
    run["curves"] = {}
    for name in CURVE_FILES:
        path = os.path.join(run_dir, name)
        if os.path.exists(path):
            with open(path) as fh:
                rows = list(csv.DictReader(fh))
            run["curves"][name[:-4]] = {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}
    return run


def _label(run, base):
    return os.path.relpath(run["dir"], base) if base else run["run_id"]


def plot_loss_curves(runs, path, base=None):
    fig, axes = plt.subplots(len(runs), 1, figsize=(7, 2.6 * len(runs)), squeeze=False)
    for ax, run in zip(axes[:, 0], runs):
        for curve_name, cols in run["curves"].items():
            for term in ("ce", "recon", "sparsity", "disjoint", "total"):
                y = cols.get(term)
                if y is not None and np.isfinite(y).any():
                    ax.plot(cols["step"], y, label=f"{curve_name}:{term}", lw=1)
        ax.set_yscale("log")
        ax.set_title(_label(run, base), fontsize=9)
        ax.set_xlabel("step")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_map_by_polyphony(runs, path, base=None):
    """One bar group per run, one bar per polyphony column."""
    width = 0.8 / len(COLUMNS)
    x = np.arange(len(runs))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(runs)), 4))
    for i, col in enumerate(COLUMNS):
        vals = [(r["eval_report"] or {}).get("map", {}).get(col) for r in runs]
        ax.bar(x + (i - 1.5) * width, [np.nan if v is None else v for v in vals], width, label=col)
    ax.set_xticks(x)
    ax.set_xticklabels([_label(r, base) for r in runs], rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 1)
    ax.legend(title="polyphony")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def summary_rows(runs, base=None):
    rows = []
    for r in runs:
        rep = r["eval_report"] or {"map": {}, "silhouette": None}
        rows.append([_label(r, base), r["kind"], *(fmt(rep["map"].get(c)) for c in COLUMNS),
                     fmt(rep.get("silhouette")), r["config_hash"], r["dataset_hash"]])
    return rows


SUMMARY_HEADER = ("run", "kind", "all", "p1", "p2", "p3", "ss", "config", "dataset")


def render_report(paths, out_dir):
    """Write plots, ``summary.txt`` and ``summary.csv``; returns the text table."""
    run_dirs = find_runs(paths)
    if not run_dirs:
        raise FileNotFoundError(f"no runs found under {', '.join(map(str, paths))}")
    base = os.path.commonpath([os.path.abspath(p) for p in paths]) if len(paths) else None
    runs = [load_run(d) for d in run_dirs]
    for r in runs:
        r["dir"] = os.path.abspath(r["dir"])
    if len(runs) == 1:
        base = os.path.dirname(runs[0]["dir"])
    os.makedirs(out_dir, exist_ok=True)
    rows = summary_rows(runs, base)
    table = render_table(SUMMARY_HEADER, rows)
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(table + "\n")
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        w.writerows(rows)
    with_curves = [r for r in runs if r["curves"]]
    if with_curves:
        plot_loss_curves(with_curves, os.path.join(out_dir, "loss_curves.png"), base)
    if len(runs) > 1:
        plot_map_by_polyphony(runs, os.path.join(out_dir, "map_by_polyphony.png"), base)
    return table
