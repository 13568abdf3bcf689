"""Figures written next to the CLI's CSV output."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

MARKERS = {"smc": "o", "mlmc": "s", "rcv": "^", "rrcv": "D"}


def plot_complexity(rows, slopes: dict, path) -> None:
    """Log-log wall time against RMSE, one line per method."""
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for method in sorted({r["method"] for r in rows}):
        pts = sorted((r["rmse"], r["wall_seconds"]) for r in rows if r["method"] == method)
        label = method.upper()
        if method in slopes and slopes[method] is not None:
            label += f" (slope {slopes[method]:.2f})"
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], marker=MARKERS.get(method, "x"), label=label)
    ax.set_xlabel("RMSE")
    ax.set_ylabel("time per run [s]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_convergence(rows, slope, path) -> None:
    """Absolute bias against the step size."""
    pts = sorted((1.0 / r["J"], r["rmse"]) for r in rows if r["rmse"] not in (None, 0.0))
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    label = "|bias|" if slope is None or math.isnan(slope) else f"|bias| (slope {slope:.2f})"
    ax.loglog([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("step size (T = 1)")
    ax.set_ylabel("absolute bias")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def gnuplot_script(csv_name: str, methods, png_name: str) -> str:
    """A gnuplot script drawing the complexity figure from the CSV."""
    lines = [
        "set datafile separator ','",
        "set logscale xy",
        "set xlabel 'RMSE'",
        "set ylabel 'time per run [s]'",
        "set key top right",
        "set terminal pngcairo size 800,600",
        f"set output '{png_name}'",
    ]
    # columns: rmse = 9, wall_seconds = 12
    parts = [
        f"'{csv_name}' using (strcol(1) eq '{m}' ? $9 : 1/0):12 with linespoints title '{m.upper()}'"
        for m in methods
    ]
    lines.append("plot " + ", \\\n     ".join(parts))
    return "\n".join(lines) + "\n"
