"""Line charts straight from a metrics CSV.

The first column named ``round`` or ``epoch`` is the x axis, an optional
``client_id`` column splits rows into one line per client, and every other
numeric column becomes its own chart. Nothing is recomputed; blank cells are
skipped.
"""

from __future__ import annotations

import csv
import math
import warnings
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from pmmoe.errors import FormatError

X_COLUMNS = ("round", "epoch")
SVG_SETTINGS = {"svg.hashsalt": "pmmoe", "svg.fonttype": "path", "path.simplify": False}


def read_metrics(path) -> tuple[str, dict[str, dict[int, list[tuple[float, float]]]]]:
    """Parse ``path`` into ``(x_name, {metric: {client_id: [(x, y), ...]}})``."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}:1: missing header")
    header = rows[0]
    x_name = next((c for c in header if c in X_COLUMNS), None)
    if x_name is None:
        raise FormatError(f"{path}:1: need a 'round' or 'epoch' column, got {header}")
    xi = header.index(x_name)
    gi = header.index("client_id") if "client_id" in header else None
    metrics = [i for i in range(len(header)) if i not in (xi, gi)]
    series: dict[str, dict[int, list[tuple[float, float]]]] = {header[i]: {} for i in metrics}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            x = float(row[xi])
            group = int(row[gi]) if gi is not None else -1
            values = [(header[i], float(row[i])) for i in metrics if row[i] != ""]
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from None
        if not math.isfinite(x):
            raise FormatError(f"{path}:{lineno}: non-finite {x_name}")
        for name, y in values:
            series[name].setdefault(group, []).append((x, y))
    return x_name, {k: v for k, v in series.items() if v}


def emit_plots(csv_path, out_dir) -> list[Path]:
    """Write one SVG per metric column; returns the written paths (empty for a header-only CSV)."""
    csv_path = Path(csv_path)
    x_name, series = read_metrics(csv_path)
    if not series:
        warnings.warn(f"{csv_path} has no data rows; no plots written", stacklevel=2)
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with matplotlib.rc_context(SVG_SETTINGS):
        for metric, groups in series.items():
            fig = Figure(figsize=(6, 4))
            ax = fig.add_subplot()
            for group in sorted(groups):
                pts = groups[group]
                label = "all" if group == -1 else f"client {group}"
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o" if len(pts) < 30 else None,
                        markersize=3, linewidth=1.2 if group == -1 else 0.8, label=label)
            ax.set_xlabel(x_name)
            ax.set_ylabel(metric)
            ax.set_title(f"{metric} ({csv_path.stem})")
            if len(groups) > 1:
                ax.legend(fontsize=6, ncol=2)
            fig.tight_layout()
            path = out_dir / f"{csv_path.stem}_{metric}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            written.append(path)
    return written
