"""Match-rate figures: one line per method, rank as a fraction of u on x."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.5,
    # fixed ids keep SVG output byte-stable across runs
    "svg.hashsalt": "raprank",
    "svg.fonttype": "none",
}


def figure_size(scale=1.0, aspect=0.62):
    width = 6.0 * scale
    return width, width * aspect


def plot_match_rates(curves, path, title=None, scale=1.0):
    """Render curves (anything with ``k_over_u``, ``match_rate``, ``method``) to ``path``.

    The format follows the file suffix (svg, png, pdf).
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size(scale))
        for c in curves:
            label = c.method or "ranking"
            if getattr(c, "dataset_id", "") and c.dataset_id != "average":
                label = f"{label} ({c.dataset_id})"
            ax.step(c.k_over_u, c.match_rate, where="post", label=label)
        ax.set_xlabel("k / u")
        ax.set_ylabel("match rate")
        ax.set_xlim(0, 1)
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3, linewidth=0.5)
        if title:
            ax.set_title(title)
        ax.legend(loc="lower left", frameon=False)
        fig.tight_layout()
        metadata = {"Date": None} if Path(path).suffix == ".svg" else None
        fig.savefig(path, metadata=metadata)
        plt.close(fig)
    return Path(path)
