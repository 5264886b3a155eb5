"""Deterministic SVG plots from the CSV artifacts written by the CLI."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

KINDS = {
    "mthr": ("d", "m_thr"),
    "gemini-style-error": ("series", "m", "mean_abs_error", "stderr"),
    "pieces": ("n", "pieces"),
}


class PlotSchemaError(ValueError):
    pass


def read_rows(csv_path, kind: str) -> list[dict]:
    if kind not in KINDS:
        raise PlotSchemaError(f"unknown plot kind {kind!r}; choose from {sorted(KINDS)}")
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in KINDS[kind] if c not in header]
        if missing:
            raise PlotSchemaError(f"{csv_path}: missing columns {missing} for kind {kind}")
        rows = list(reader)
    if not rows:
        raise PlotSchemaError(f"{csv_path}: no data rows")
    return rows


def _num(row: dict, key: str) -> float:
    raw = row[key].strip()
    if raw in ("", "inf", "none", "None"):
        return math.inf
    try:
        return float(raw)
    except ValueError:
        raise PlotSchemaError(f"column {key}: {raw!r} is not a number") from None


def fit_loglog_slope(xs, ys) -> float:
    """Least-squares slope of log y against log x."""
    x, y = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(x, y, 1)[0])


def _plot_mthr(ax, rows):
    groups = defaultdict(list)
    for r in rows:
        groups[r.get("task", "") or "m_thr"].append((_num(r, "d"), _num(r, "m_thr")))
    for label in sorted(groups):
        pts = sorted(groups[label])
        ds = [d for d, _ in pts]
        # cells that never dropped below threshold are drawn at the top of the axis
        ms = [m if math.isfinite(m) else np.nan for _, m in pts]
        ax.plot(ds, ms, marker="o", linestyle="-", label=label)
    ax.set_xlabel("model dimension d")
    ax.set_ylabel("threshold vocabulary size m_thr")
    ax.legend()


def _plot_error(ax, rows):
    groups = defaultdict(list)
    for r in rows:
        groups[r["series"]].append((_num(r, "m"), _num(r, "mean_abs_error"), _num(r, "stderr")))
    for label in sorted(groups):
        pts = sorted(groups[label])
        ax.errorbar([p[0] for p in pts], [p[1] for p in pts], yerr=[p[2] for p in pts],
                    marker="o", capsize=3, label=label)
    ax.set_xlabel("vocabulary size m")
    ax.set_ylabel("mean absolute counting error")
    ax.legend()


def _plot_pieces(ax, rows):
    pts = sorted((_num(r, "n"), _num(r, "pieces")) for r in rows)
    ns, ps = [p[0] for p in pts], [p[1] for p in pts]
    ax.loglog(ns, ps, marker="o", label="greedy pieces")
    if all("lower_bound" in r for r in rows):
        lb = sorted((_num(r, "n"), _num(r, "lower_bound")) for r in rows)
        ax.loglog([p[0] for p in lb], [max(p[1], 1) for p in lb], marker="s", linestyle="--",
                  label="floor((n-1)/3)")
    if len(pts) >= 2:
        slope = fit_loglog_slope(ns, ps)
        ax.annotate(f"fitted log-log slope {slope:.3f}", xy=(0.05, 0.9), xycoords="axes fraction")
    ax.set_xlabel("n")
    ax.set_ylabel("linear pieces for 1/x")
    ax.legend(loc="lower right")


def emit_plot(csv_path, kind: str, out_path=None) -> Path:
    """Render ``csv_path`` as an SVG next to it (or at ``out_path``)."""
    rows = read_rows(csv_path, kind)
    out = Path(out_path) if out_path else Path(csv_path).with_suffix(".svg")
    with plt.rc_context({"svg.hashsalt": "countlab", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        {"mthr": _plot_mthr, "gemini-style-error": _plot_error, "pieces": _plot_pieces}[kind](ax, rows)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(out, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out
