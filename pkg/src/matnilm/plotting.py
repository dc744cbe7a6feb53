"""Report figures rendered to image files (non-interactive backend)."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_report(
    path: str,
    appliances: Sequence[str],
    y: np.ndarray,
    y_hat: np.ndarray,
    aggregate: Optional[np.ndarray] = None,
    history: Optional[List[Dict[str, float]]] = None,
    period_s: int = 3,
    max_points: int = 2400,
) -> None:
    """Disaggregation traces per appliance, plus a convergence panel if a history is given.

    ``y`` and ``y_hat`` are ``(n, H)`` in watts; only the first ``max_points``
    samples are drawn.
    """
    n = len(appliances)
    rows = n + (1 if history else 0)
    fig, axes = plt.subplots(rows, 1, figsize=(10, 2.4 * rows), squeeze=False)
    axes = axes[:, 0]
    H = min(y.shape[1], max_points)
    t = np.arange(H) * period_s / 3600.0
    for i, a in enumerate(appliances):
        ax = axes[i]
        if aggregate is not None:
            ax.plot(t, aggregate[:H], color="0.8", lw=0.8, label="aggregate")
        ax.plot(t, y[i, :H], lw=1.0, label="truth")
        ax.plot(t, y_hat[i, :H], lw=1.0, ls="--", label="estimate")
        ax.set_ylabel(f"{a} [W]")
        ax.legend(loc="upper right", fontsize=7)
    axes[n - 1].set_xlabel("time [h]")
    if history:
        ax = axes[-1]
        epochs = [r["epoch"] for r in history]
        ax.plot(epochs, [r["train_loss"] for r in history], label="train")
        ax.plot(epochs, [r["val_loss"] for r in history], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
