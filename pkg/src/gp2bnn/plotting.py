"""Static SVG figures: sample fans, loss traces, predictive bands."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed hash salt keeps SVG bytes stable across runs
matplotlib.rcParams["svg.hashsalt"] = "gp2bnn"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def sample_fan(path, x, groups: dict, max_lines: int = 30, title: str = ""):
    """Overlay sampled functions; ``groups`` maps a label to a (n, len(x)) array."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    order = np.argsort(x)
    for (label, F), color in zip(groups.items(), ("C0", "C1", "C2", "C3")):
        F = np.asarray(F)
        for i in range(min(max_lines, F.shape[0])):
            ax.plot(x[order], F[i, order], color=color, lw=0.7, alpha=0.5, label=label if i == 0 else None)
    ax.set_xlabel("x")
    ax.set_ylabel("f(x)")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right")
    _save(fig, path)


def loss_trace(path, trace, title: str = "training loss"):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(1, len(trace) + 1), trace, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("normalized W2")
    ax.set_title(title)
    _save(fig, path)


def predictive_band(path, x, mean, total_var, data_x=None, data_y=None):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    order = np.argsort(x)
    sd = np.sqrt(total_var)
    ax.fill_between(x[order], (mean - 2 * sd)[order], (mean + 2 * sd)[order], alpha=0.3, label="+-2 sd")
    ax.plot(x[order], mean[order], lw=1.2, label="mean")
    if data_x is not None:
        ax.scatter(data_x, data_y, s=8, color="k", label="data")
    ax.legend(loc="upper right")
    _save(fig, path)
