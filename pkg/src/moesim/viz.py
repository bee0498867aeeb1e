"""Figure rendering for the report-emitting CLI paths.

Every figure goes to a file next to the delimited output; nothing opens a
window. PNG metadata is stripped so repeated runs produce byte-identical
files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .engine import SweepPoint
from .metrics import ActivationReport

_SAVE_KWARGS = {"dpi": 120, "metadata": {"Software": None}}


def render_activation_figures(report: ActivationReport, out_prefix: str,
                              bar_layer: int = 1) -> list[str]:
    """Heatmap of layer/expert counts plus one per-layer activation bar chart.

    Returns the written file paths.
    """
    counts = report.layer_expert_counts
    paths = []

    fig, ax = plt.subplots(figsize=(10, 5))
    im = ax.imshow(counts, aspect="auto", interpolation="nearest", cmap="viridis")
    ax.set_xlabel("expert id")
    ax.set_ylabel("layer id")
    ax.set_title("Expert activation counts per layer")
    fig.colorbar(im, ax=ax, label="activations")
    path = f"{out_prefix}_heatmap.png"
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    paths.append(path)

    layer = min(bar_layer, counts.shape[0] - 1)
    fig, ax = plt.subplots(figsize=(10, 4))
    ax.bar(np.arange(counts.shape[1]), counts[layer], color="steelblue")
    ax.set_xlabel("expert id")
    ax.set_ylabel("activations")
    ax.set_title(f"Aggregated expert activations, layer {layer}")
    path = f"{out_prefix}_layer{layer}.png"
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    paths.append(path)

    if report.prompt_layer_distinct.size:
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.hist(report.prompt_layer_distinct.reshape(-1),
                bins=np.arange(0, counts.shape[1] + 2) - 0.5,
                color="darkorange")
        ax.set_xlabel("distinct experts used per (prompt, layer)")
        ax.set_ylabel("count")
        ax.set_title("Per-prompt expert sparsity")
        path = f"{out_prefix}_distinct.png"
        fig.savefig(path, **_SAVE_KWARGS)
        plt.close(fig)
        paths.append(path)
    return paths


def render_sweep_figure(points: list[SweepPoint], out_prefix: str) -> list[str]:
    """Hit rates vs cache capacity, one line per rate and predictor."""
    by_kind: dict[str, list[SweepPoint]] = {}
    for p in points:
        by_kind.setdefault(p.predictor_kind, []).append(p)

    fig, ax = plt.subplots(figsize=(8, 5))
    for kind, rows in sorted(by_kind.items()):
        rows = sorted(rows, key=lambda p: p.capacity_fraction)
        xs = [p.capacity_fraction for p in rows]
        cache_rates = [p.report.cache_hit_rate or 0.0 for p in rows]
        pred_rates = [p.report.prediction_hit_rate or 0.0 for p in rows]
        ax.plot(xs, cache_rates, marker="o", label=f"{kind} cache hit")
        ax.plot(xs, pred_rates, marker="s", linestyle="--",
                label=f"{kind} prediction hit")
    ax.set_xlabel("GPU expert capacity (fraction of all experts)")
    ax.set_ylabel("hit rate")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend()
    ax.set_title("Cache and prediction hit rate vs capacity")
    path = f"{out_prefix}.png"
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return [path]
