"""
Stream and Diagnostics Visualization Module
===========================================
Renders stream timelines, gate diagnostics and context-centroid distance
matrices to PNG files. Plotting never fails a command: errors are logged.
"""

import logging
from pathlib import Path
from typing import List, Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


def plot_stream_timeline(samples: pd.DataFrame, output_path: Path, window: int = 50) -> Optional[Path]:
    """
    Rolling accuracy and per-sample latency over a stream.

    Args:
        samples: per-sample stream rows (index, context_id, hit, correct, latency_ns)
        output_path: PNG destination
        window: rolling-accuracy window in samples

    Returns:
        The written path, or None if plotting failed
    """
    try:
        if samples.empty:
            return None
        rolling = samples["correct"].astype(float).rolling(window, min_periods=1).mean()
        switches = samples.index[samples["context_id"] != samples["context_id"].shift()].tolist()[1:]

        fig, (ax_acc, ax_lat) = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
        ax_acc.plot(samples["index"], rolling, label=f"Accuracy (rolling {window})")
        ax_acc.set_ylabel("Accuracy")
        ax_acc.set_ylim(0, 1.05)
        ax_lat.plot(samples["index"], samples["latency_ns"] / 1e3, linewidth=0.5, label="Latency")
        misses = samples[~samples["hit"].astype(bool)]
        ax_lat.scatter(misses["index"], misses["latency_ns"] / 1e3, color="red", s=12, label="Cache miss")
        ax_lat.set_ylabel("Latency (us)")
        ax_lat.set_xlabel("Sample")
        for ax in (ax_acc, ax_lat):
            for pos in switches:
                ax.axvline(samples.loc[pos, "index"], color="gray", linestyle="--", alpha=0.6)
            ax.grid(True, alpha=0.3)
            ax.legend()
        plt.tight_layout()
        plt.savefig(output_path)
        plt.close(fig)
        return output_path
    except Exception as e:
        logger.warning(f"stream timeline plot failed: {e}")
        return None


def plot_gate_diagnostics(diagnostics: List[dict], output_path: Path) -> Optional[Path]:
    """Mean alpha_context for easy vs hard-but-fixed samples per tier."""
    try:
        if not diagnostics:
            return None
        tiers = [d["tier"] for d in diagnostics]
        x = np.arange(len(tiers))
        easy = [d["easy"] if d["easy"] is not None else np.nan for d in diagnostics]
        hard = [d["hard_but_fixed"] if d["hard_but_fixed"] is not None else np.nan for d in diagnostics]
        plt.figure(figsize=(6, 4))
        plt.bar(x - 0.2, easy, width=0.4, label="Easy")
        plt.bar(x + 0.2, hard, width=0.4, label="Hard-but-fixed")
        plt.xticks(x, tiers)
        plt.ylabel("Mean context weight")
        plt.title("Gate Diagnostics")
        plt.grid(True, alpha=0.3)
        plt.legend()
        plt.tight_layout()
        plt.savefig(output_path)
        plt.close()
        return output_path
    except Exception as e:
        logger.warning(f"gate diagnostics plot failed: {e}")
        return None


def plot_centroid_distances(distances: pd.DataFrame, output_path: Path) -> Optional[Path]:
    try:
        plt.figure(figsize=(5, 4))
        plt.imshow(distances.values, cmap="viridis")
        plt.colorbar(label="Euclidean distance")
        plt.xticks(range(len(distances.columns)), distances.columns, rotation=45, ha="right")
        plt.yticks(range(len(distances.index)), distances.index)
        plt.title("Context Embedding Centroids")
        plt.tight_layout()
        plt.savefig(output_path)
        plt.close()
        return output_path
    except Exception as e:
        logger.warning(f"centroid distance plot failed: {e}")
        return None
