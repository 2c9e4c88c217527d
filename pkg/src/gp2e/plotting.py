"""Training-curve rendering: metrics CSV in, standalone SVG out.

The SVG is byte-reproducible for identical input: hashed element ids are
salted with a constant and the creation-date metadata is suppressed.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ConfigError
from .training import METRICS_HEADER


def read_metrics(path: str) -> list[dict]:
    rows = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ConfigError(f"metrics line 1: expected header {METRICS_HEADER!r}")
    cols = METRICS_HEADER.split(",")
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(cols):
            raise ConfigError(f"metrics line {i}: expected {len(cols)} fields, got {len(parts)}")
        try:
            rows.append(
                {
                    "stage": int(parts[0]),
                    "step": int(parts[1]),
                    "loss": float(parts[2]),
                    "success_rate": float(parts[3]),
                    "batch_size": int(parts[4]),
                    "sim_steps": int(parts[5]),
                }
            )
        except ValueError as exc:
            raise ConfigError(f"metrics line {i}: {exc}") from exc
    return rows


def plot_metrics(metrics_path: str, out_path: str) -> str:
    """Render success rate against cumulative training step, one marker per
    evaluation, with a vertical line at the stage boundary. Returns a
    one-line summary (best rate and the stage it occurred in)."""
    rows = read_metrics(metrics_path)
    if not rows:
        raise ConfigError("metrics line 2: file has no data rows")
    stage1_span = max((r["step"] for r in rows if r["stage"] == 1), default=0)
    xs = [r["step"] + (stage1_span if r["stage"] == 2 else 0) for r in rows]
    ys = [r["success_rate"] for r in rows]

    plt.rcParams["svg.hashsalt"] = "gp2e"
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, ys, marker="o", color="tab:red", label="evaluation success")
    if any(r["stage"] == 2 for r in rows) and stage1_span:
        ax.axvline(stage1_span, color="gray", linestyle="--", label="stage boundary")
    ax.set_xlabel("training step")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right")
    fig.tight_layout()
    tmp = f"{out_path}.tmp"
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, out_path)

    best = max(rows, key=lambda r: r["success_rate"])
    return f"best success {best['success_rate']:.3f} at stage {best['stage']} step {best['step']}"
