"""
Shared helpers: row-wise cosine, segment summary features, z-scoring and metrics.
"""

from typing import Dict

import numpy as np
import torch
from sklearn.metrics import accuracy_score, precision_recall_fscore_support

NUM_BANDS = 4


def batch_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity; rows with a zero norm get 0."""
    dot = (a * b).sum(dim=-1)
    norms = a.norm(dim=-1) * b.norm(dim=-1)
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    return torch.where(norms > 0, dot / safe, torch.zeros_like(dot))


def summary_features(segments: np.ndarray) -> np.ndarray:
    """Per channel: mean, std and energy in 4 equal DFT bands -> (N, C * 6)."""
    segments = np.asarray(segments, dtype=np.float64)
    n, c, t = segments.shape
    mean = segments.mean(axis=2)
    std = segments.std(axis=2)
    spectrum = np.abs(np.fft.rfft(segments, axis=2)[:, :, 1:]) ** 2 / t
    bands = np.array_split(np.arange(spectrum.shape[2]), NUM_BANDS)
    energy = np.stack([spectrum[:, :, idx].sum(axis=2) for idx in bands], axis=2)
    return np.concatenate([mean[:, :, None], std[:, :, None], energy], axis=2).reshape(n, c * (2 + NUM_BANDS))


def zscore(features: np.ndarray, mean: np.ndarray = None, std: np.ndarray = None):
    """z-normalize columns; returns (normalized, mean, std) with a 1e-6 std floor."""
    if mean is None:
        mean = features.mean(axis=0)
    if std is None:
        std = features.std(axis=0)
    std = np.maximum(std, 1e-6)
    return (features - mean) / std, mean, std


def classification_metrics(y_true, y_pred, num_classes: int) -> Dict[str, float]:
    """Accuracy plus macro-averaged precision, recall and F1 over all K classes."""
    labels = list(range(num_classes))
    precision, recall, f1, _ = precision_recall_fscore_support(
        y_true, y_pred, labels=labels, average="macro", zero_division=0)
    return {
        "accuracy": float(accuracy_score(y_true, y_pred)),
        "precision": float(precision),
        "recall": float(recall),
        "f1": float(f1),
    }
