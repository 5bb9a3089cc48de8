"""Matplotlib rendering for report figures, written as reproducible SVG.

Figures carry a trailing XML comment with a configuration hash so a report
file can be traced back to the inputs that produced it.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "commer"
plt.rcParams["figure.figsize"] = (6.0, 4.0)
plt.rcParams["font.size"] = 9


def save_svg(fig, path, config_hash: str = "") -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    if config_hash:
        with open(path, "a", encoding="utf-8") as f:
            f.write(f"<!-- config: {config_hash} -->\n")


def new_figure(xlabel: str, ylabel: str, title: str = ""):
    fig, ax = plt.subplots()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return fig, ax
