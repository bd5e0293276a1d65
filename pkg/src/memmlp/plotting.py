"""Figures written next to the text/JSON reports of the CLI."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated runs byte-identical
_PNG_META = {"Software": None}
REGIONS = ("mpjpe", "hand_pe", "upper_pe", "lower_pe", "root_pe")


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss(total, path, lr=None, title: str = "training loss") -> Path:
    """Loss per step on a log scale, with the learning rate on a twin axis."""
    total = np.asarray(total, dtype=np.float64)
    steps = np.arange(1, len(total) + 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, total, lw=0.8, color="tab:blue", label="loss")
    if len(total) >= 20:
        w = max(len(total) // 50, 5)
        smooth = np.convolve(total, np.ones(w) / w, mode="valid")
        ax.plot(steps[w - 1:], smooth, lw=1.5, color="tab:orange", label=f"mean of {w}")
    if np.all(total > 0):
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(loc="upper right", frameon=False)
    if lr is not None:
        ax2 = ax.twinx()
        ax2.plot(steps, np.asarray(lr), lw=0.8, ls="--", color="gray")
        ax2.set_ylabel("learning rate", color="gray")
    return _save(fig, path)


def plot_region_errors(reports: dict, path) -> Path:
    """Grouped bars of position errors (cm) per body region, one group per pathway.

    ``reports`` maps a pathway name to a dict of metric values.
    """
    names = list(reports)
    x = np.arange(len(REGIONS))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(6.5, 3.5))
    for i, name in enumerate(names):
        vals = [reports[name][k] for k in REGIONS]
        ax.bar(x + (i - (len(names) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels([k.replace("_pe", "") for k in REGIONS])
    ax.set_ylabel("position error [cm]")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_trajectories(gt_pos, preds: dict, joints: dict, fps: float, path) -> Path:
    """Joint heights over time, ground truth against each predicted pathway.

    ``joints`` maps a label to a joint index; ``preds`` maps a pathway name to
    an ``(N, J, 3)`` array aligned with ``gt_pos``.
    """
    gt_pos = np.asarray(gt_pos)
    t = np.arange(len(gt_pos)) / fps
    fig, axes = plt.subplots(len(joints), 1, figsize=(6.5, 2.0 * len(joints)), sharex=True, squeeze=False)
    for ax, (label, j) in zip(axes[:, 0], joints.items()):
        ax.plot(t, gt_pos[:, j, 1], color="black", lw=1.2, label="ground truth")
        for name, pos in preds.items():
            ax.plot(t, np.asarray(pos)[:, j, 1], lw=0.9, label=name)
        ax.set_ylabel(f"{label} y [m]")
    axes[0, 0].legend(frameon=False, fontsize="small", ncol=len(preds) + 1)
    axes[-1, 0].set_xlabel("time [s]")
    return _save(fig, path)


def plot_latency(times_ms, path, median_ms: float | None = None) -> Path:
    """Histogram of per-frame latency."""
    times = np.asarray(times_ms, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(times, bins=min(50, max(len(times) // 5, 5)), color="tab:blue", alpha=0.8)
    med = float(np.median(times)) if median_ms is None else median_ms
    ax.axvline(med, color="tab:red", lw=1.2, label=f"median {med:.3f} ms")
    ax.set_xlabel("latency per frame [ms]")
    ax.set_ylabel("frames")
    ax.legend(frameon=False)
    return _save(fig, path)
