"""Static SVG line plots for sweep results."""

from __future__ import annotations

import logging
import os
from collections import defaultdict
from typing import Dict, List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

AXIS_LABELS = {
    "prompt_interval": "prompt refresh interval K_p",
    "response_interval": "response refresh interval K_r",
    "update_ratio": "adaptive update ratio ρ",
    "selection": "token selection",
}
SERIES = (("speedup", "FLOPs speedup (×)"), ("match_rate", "token match rate vs baseline"))

# fixed ids and no timestamp keep the SVG bytes stable between runs
matplotlib.rcParams["svg.hashsalt"] = "dcache"


def _series(rows: Sequence[Mapping], axis: str, value: str) -> Dict[str, List[tuple]]:
    others = [a for a in AXIS_LABELS if a != axis]
    lines = defaultdict(list)
    for row in rows:
        label = ", ".join(f"{a}={row[a]}" for a in others if a in row)
        lines[label].append((row[axis], row[value]))
    return {label: sorted(points, key=lambda p: str(p[0]) if axis == "selection" else p[0])
            for label, points in sorted(lines.items())}


def plot_sweep(rows: Sequence[Mapping], axes: Sequence[str], out_dir) -> List[str]:
    """One SVG per (swept axis, series). Returns the written paths."""
    written = []
    for axis in axes:
        for value, ylabel in SERIES:
            fig, ax = plt.subplots(figsize=(7, 4.5))
            for label, points in _series(rows, axis, value).items():
                xs = [str(p[0]) if axis == "selection" else p[0] for p in points]
                ax.plot(xs, [p[1] for p in points], marker="o", label=label or None)
            ax.set_xlabel(AXIS_LABELS.get(axis, axis))
            ax.set_ylabel(ylabel)
            ax.grid(True, alpha=0.3)
            if len(ax.get_lines()) > 1:
                ax.legend(fontsize="small")
            fig.tight_layout()
            path = os.path.join(out_dir, f"{value}_vs_{axis}.svg")
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
            logger.debug("wrote %s", path)
    return written
