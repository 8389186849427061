"""PSNR curve figures written straight to image files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_psnr_curves(traces: dict, path, title: str = "PSNR per global iteration") -> None:
    """``traces`` maps a label to a list of metric rows (each with ``t`` and ``psnr_db``)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in traces.items():
        ax.plot([r["t"] for r in rows], [r["psnr_db"] for r in rows], marker=".", label=label)
    ax.set_xlabel("global iteration")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
