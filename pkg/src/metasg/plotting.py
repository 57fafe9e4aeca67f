"""SVG figures for metrics and matrix CSVs (matplotlib, Agg backend, reproducible bytes)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DataError  # noqa: E402

SVG_SALT = "metasg"
_RC = {"svg.hashsalt": SVG_SALT, "svg.fonttype": "none", "path.simplify": False}


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no CSV at {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise DataError(f"{path} has no header row")
    return rows[0], rows[1:]


def read_series(metrics_csv) -> dict[str, np.ndarray]:
    """Numeric columns of a metrics CSV keyed by name; ``round`` is the x axis."""
    from .pipeline import METRIC_COLUMNS, SERIES

    head, body = _read_rows(metrics_csv)
    missing = [c for c in METRIC_COLUMNS if c not in head]
    if missing:
        raise DataError(f"metrics CSV lacks columns {missing}")
    idx = {c: head.index(c) for c in head}
    out = {}
    try:
        out["round"] = np.array([float(r[idx["round"]]) for r in body])
        for c in SERIES:
            out[c] = np.array([float(r[idx[c]]) for r in body])
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed metrics row in {metrics_csv}: {exc}") from None
    return out


def series_figure(x, y, name: str):
    """Figure with fixed axes limits; the line (if any) carries ``gid=series-<name>``."""
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=72)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = np.isfinite(y)
    x, y = x[keep], y[keep]
    if x.size:
        ax.plot(x, y, color="C0", lw=1.5, gid=f"series-{name}")
        lo, hi = float(y.min()), float(y.max())
        pad = 0.05 * (hi - lo) if hi > lo else 0.5
        ax.set_xlim(float(x.min()), float(x.max()) if x.max() > x.min() else float(x.min()) + 1.0)
        ax.set_ylim(lo - pad, hi + pad)
    else:
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("round")
    ax.set_ylabel(name)
    ax.grid(True, lw=0.3)
    fig.tight_layout()
    return fig, ax


def save_svg(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def emit_plots(metrics_csv, out_dir) -> list[Path]:
    """One SVG per metric series of ``metrics_csv``."""
    from .pipeline import SERIES

    data = read_series(metrics_csv)
    paths = []
    for name in SERIES:
        with plt.rc_context(_RC):
            fig, _ = series_figure(data["round"], data[name], name)
            paths.append(save_svg(fig, Path(out_dir) / f"{name}.svg"))
    return paths


def emit_matrix_plot(matrix_csv, out_dir) -> Path:
    """Grouped bars of final clean accuracy per (defense, attack) cell."""
    from .pipeline import read_matrix

    cells = read_matrix(matrix_csv)
    defenses = list(dict.fromkeys(d for d, _ in cells))
    attacks = list(dict.fromkeys(a for _, a in cells))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.2), dpi=72)
        width = 0.8 / max(len(attacks), 1)
        xs = np.arange(len(defenses))
        for j, a in enumerate(attacks):
            vals = [cells[(d, a)]["acc"] for d in defenses]
            ax.bar(xs + j * width, vals, width, label=a, gid=f"bars-{a}")
        ax.set_xticks(xs + width * (len(attacks) - 1) / 2, defenses, rotation=30, ha="right")
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("final clean accuracy")
        ax.legend(fontsize=7)
        fig.tight_layout()
        return save_svg(fig, Path(out_dir) / "matrix_acc.svg")
