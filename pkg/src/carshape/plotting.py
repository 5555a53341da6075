"""Report figures.  PNGs are written without timestamps so reruns are byte-identical."""
from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write_bytes  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    atomic_write_bytes(Path(path), buf.getvalue())


def plot_variance(fractions, path) -> None:
    """Cumulative variance explained against the number of basis modes."""
    n = np.arange(1, len(fractions) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(n, fractions, marker="o")
    ax.set_xlabel("basis modes")
    ax.set_ylabel("variance explained")
    ax.set_xticks(n)
    ax.set_ylim(min(0.0, float(np.min(fractions))), 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_aop_curve(angle_errors, ious, path, iou_threshold: float = 0.7, marks=(5, 15, 30)) -> None:
    """Orientation precision as a function of the angle threshold."""
    t = np.linspace(0.0, 45.0, 181)
    err = np.asarray(angle_errors, dtype=float)
    ok = np.asarray(ious, dtype=float) > iou_threshold
    prec = [(ok & (err <= x)).mean() if err.size else np.nan for x in t]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(t, prec)
    for m in marks:
        ax.axvline(m, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("azimuth threshold (deg)")
    ax.set_ylabel("AOP")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_apk(per_keypoint, names, path) -> None:
    vals = np.nan_to_num(np.asarray(per_keypoint, dtype=float), nan=0.0)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(np.arange(len(vals)), vals)
    ax.set_xticks(np.arange(len(vals)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("APK")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    _save(fig, path)
