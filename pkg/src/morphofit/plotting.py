"""SVG report figures: per-measurement error histograms and path-count sweeps."""
from __future__ import annotations

import io
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fileio import atomic_write_bytes  # noqa: E402

# fixed ids and no timestamp so reruns give identical files
_RC = {"svg.hashsalt": "morphofit", "svg.fonttype": "path"}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    with matplotlib.rc_context(_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def error_histogram(errors_mm: Sequence[float], path, title: str = "",
                    limit_mm: Optional[float] = None, bins: int = 20) -> None:
    """Histogram of signed estimation errors with the acceptance limit in red."""
    e = np.asarray(errors_mm, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    span = max(float(np.abs(e).max()) if len(e) else 1.0, limit_mm or 0.0) * 1.1
    ax.hist(e, bins=np.linspace(-span, span, bins + 1), color="0.55", edgecolor="white")
    if limit_mm is not None:
        for x in (-limit_mm, limit_mm):
            ax.axvline(x, color="red", linewidth=1.5)
    ax.set_xlabel("estimate - truth [mm]")
    ax.set_ylabel("subjects")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def sweep_plot(sweeps, path, title: str = "MAE vs. number of paths") -> None:
    """One line per measurement: cross-validated MAE against path count ``C``."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for sw in sweeps:
        c, m = zip(*sw.entries)
        ax.plot(c, m, marker="o", markersize=3, linewidth=1, label=sw.name)
    ax.set_xlabel("number of paths C")
    ax.set_ylabel("MAE [mm]")
    ax.set_title(title)
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    _save(fig, path)
