"""
Shift Lab
=========
MMD estimation, tier construction, the shift-severity index with regime
mapping, and the shift-controllable synthetic dataset generator.
"""

import copy
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.linalg import expm
from scipy.spatial.distance import cdist, pdist
from torch import nn

from general.encoders import SensorEncoder
from general.errors import ConfigurationError, ContractViolation
from general.models import (ModelDims, OptimizerConfig, RegimeConfig, SensorDataset, ShiftReport,
                            SyntheticSpec, TrainingReport)
from general.numerics import (STREAM_DATA, STREAM_INIT, STREAM_SAMPLING, STREAM_SPLIT, ParamStore,
                              RngState, adamw_step, as_tensor, epoch_batches, forward_backward,
                              init_parameters)
from general.pretraining import make_regime, split_indices
from general.process import summary_features, zscore

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6
TIER_NAMES = ("Low", "Mid", "High")


# --- kernel two-sample statistics ----------------------------------------------

def _subsample(points: np.ndarray, max_points: int, rng: Optional[RngState]) -> np.ndarray:
    if len(points) <= max_points:
        return points
    rng = rng or RngState(0, STREAM_SAMPLING)
    return points[np.sort(rng.permutation(len(points))[:max_points])]


def median_heuristic(points, max_points: int = 2000, rng: Optional[RngState] = None) -> float:
    """Median pairwise Euclidean distance (seeded subsample above ``max_points``)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if len(points) < 2:
        raise ContractViolation("median heuristic needs at least 2 points")
    sample = _subsample(points, max_points, rng)
    sigma = float(np.median(pdist(sample, metric="euclidean")))
    return max(sigma, SIGMA_FLOOR)


def gaussian_kernel(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-cdist(a, b, metric="sqeuclidean") / (2.0 * sigma ** 2))


def mmd_squared(X, Y, sigma: float, kind: str = "biased") -> float:
    """Squared MMD with a Gaussian kernel; V-statistic or U-statistic."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X, Y = X[:, None], Y[:, None]
    if sigma <= 0:
        raise ContractViolation(f"kernel bandwidth must be positive, got {sigma}")
    if kind not in ("biased", "unbiased"):
        raise ContractViolation(f"unknown estimator '{kind}'")
    m, n = len(X), len(Y)
    if m < 1 or n < 1:
        raise ContractViolation("MMD needs non-empty point sets")
    if X.shape[1] != Y.shape[1]:
        raise ContractViolation("point sets have different dimensionality")

    k_xx = gaussian_kernel(X, X, sigma)
    k_yy = gaussian_kernel(Y, Y, sigma)
    k_xy = gaussian_kernel(X, Y, sigma)
    if kind == "biased":
        return float(k_xx.mean() + k_yy.mean() - 2.0 * k_xy.mean())
    if m < 2 or n < 2:
        raise ContractViolation("unbiased MMD needs at least 2 points per set")
    xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    return float(xx + yy - 2.0 * k_xy.mean())


def mmd(X, Y, sigma: float, kind: str = "biased") -> float:
    """sqrt(max(MMD^2, 0))."""
    return math.sqrt(max(mmd_squared(X, Y, sigma, kind), 0.0))


def shift_features(segments: np.ndarray, mode: str) -> np.ndarray:
    if mode == "summary":
        return summary_features(segments)
    if mode == "raw":
        return np.asarray(segments, dtype=np.float64).reshape(len(segments), -1)
    raise ConfigurationError(f"unknown feature mode '{mode}'", key="shift.features")


def assign_tiers(ranked: Sequence[str]) -> Dict[str, str]:
    """Low/Mid/High for min/median/max; tertiles for more than 3 targets."""
    n = len(ranked)
    return {name: TIER_NAMES[min(2, (3 * i) // n)] for i, name in enumerate(ranked)}


def build_tiers(dataset: SensorDataset, source_contexts: Sequence[str], target_contexts: Sequence[str],
                features: str = "summary", kind: str = "biased", max_points: int = 2000,
                rng: Optional[RngState] = None) -> ShiftReport:
    """MMD from pooled source samples to each target context, ranked into tiers."""
    if len(target_contexts) < 3:
        raise ContractViolation("a 3-tier split needs at least 3 target contexts")
    overlap = set(source_contexts) & set(target_contexts)
    if overlap:
        raise ContractViolation(f"contexts {sorted(overlap)} are both source and target")
    missing = (set(source_contexts) | set(target_contexts)) - set(dataset.contexts)
    if missing:
        raise ConfigurationError(f"contexts {sorted(missing)} are not in the dataset", key="shift")

    rng = rng or RngState(0, STREAM_SAMPLING)
    src_idx = dataset.indices_for(source_contexts)
    groups = {name: dataset.indices_for([name]) for name in target_contexts}
    pooled_idx = np.concatenate([src_idx, *groups.values()])
    feats = shift_features(dataset.segments[pooled_idx], features)
    feats, _, _ = zscore(feats)
    lookup = {int(i): row for row, i in enumerate(pooled_idx)}

    def rows(idx: np.ndarray, key: int) -> np.ndarray:
        return _subsample(feats[[lookup[int(i)] for i in idx]], max_points, rng.child(key))

    sigma = median_heuristic(feats, max_points, rng.child(0))
    source = rows(src_idx, 1)
    values = {}
    for j, name in enumerate(sorted(target_contexts)):
        values[name] = mmd(source, rows(groups[name], 2 + j), sigma, kind)
        logger.info(f"MMD(source, {name}) = {values[name]:.4f}")

    ranked = sorted(values, key=lambda c: (values[c], c))
    ties = sorted({c for a, b in zip(ranked, ranked[1:]) if values[a] == values[b] for c in (a, b)})
    if ties:
        logger.warning(f"MMD ties broken by name: {ties}")
    return ShiftReport(mmd=values, tiers=assign_tiers(ranked), sigma=sigma, kind=kind,
                       features=features, ties=ties)


def tier_contexts(report: ShiftReport, tier: str) -> List[str]:
    return sorted(c for c, t in report.tiers.items() if t == tier)


# --- severity index --------------------------------------------------------------

def compute_cm(perf_low: float, perf_high: float) -> float:
    """C_m = 1 - perf_high / perf_low."""
    if perf_low <= 0:
        raise ContractViolation(f"perf_low must be positive, got {perf_low}")
    return 1.0 - perf_high / perf_low


def select_regime(cm: float, weak_threshold: float = 0.25, strong_threshold: float = 0.45,
                  lam: Optional[float] = None, gamma: Optional[float] = None) -> RegimeConfig:
    if not math.isfinite(cm):
        raise ContractViolation(f"C_m must be finite, got {cm}")
    if cm < weak_threshold:
        name = "weak"
    elif cm < strong_threshold:
        name = "medium"
    else:
        name = "strong"
    return make_regime(name, lam=lam, gamma=gamma)


# --- synthetic data ------------------------------------------------------------

def class_templates(spec: SyntheticSpec) -> np.ndarray:
    """(K, C, 4) per class/channel: two frequencies (cycles per window) and two amplitudes."""
    gen = RngState(spec.seed, STREAM_DATA, path=(0,)).next_generator()
    max_cycles = max(2.0, spec.length / 8.0)
    freqs = gen.uniform(1.0, max_cycles, (spec.num_classes, spec.channels, 2))
    amps = gen.uniform(0.5, 1.5, (spec.num_classes, spec.channels, 2))
    return np.concatenate([freqs, amps], axis=2)


def class_phases(spec: SyntheticSpec) -> np.ndarray:
    gen = RngState(spec.seed, STREAM_DATA, path=(1,)).next_generator()
    return gen.uniform(0.0, 2 * np.pi, (spec.num_classes, spec.channels, 2))


def clean_signal(spec: SyntheticSpec, templates: np.ndarray, phases: np.ndarray, label: int,
                 jitter: Optional[np.random.Generator] = None) -> np.ndarray:
    """Class base signal (C, T), optionally with per-sample phase/amplitude jitter."""
    t = np.arange(spec.length, dtype=np.float64) / spec.length
    freqs, amps = templates[label, :, :2], templates[label, :, 2:].copy()
    phi = phases[label].copy()
    if jitter is not None:
        phi = phi + jitter.normal(0.0, 1.0, phi.shape) * spec.phase_jitter
        amps = amps * (1.0 + jitter.normal(0.0, 1.0, amps.shape) * spec.amplitude_jitter)
    waves = amps[:, :, None] * np.sin(2 * np.pi * freqs[:, :, None] * t[None, None, :] + phi[:, :, None])
    return waves.sum(axis=1)


def mixing_generator(spec: SyntheticSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Skew-symmetric generator A of the seeded target rotation expm(A), plus an offset direction."""
    gen = RngState(spec.seed, STREAM_DATA, path=(2,)).next_generator()
    b = gen.normal(size=(spec.channels, spec.channels))
    skew = b - b.T
    norm = np.linalg.norm(skew, 2)
    if norm > 0:
        skew = skew * (np.pi / 2) / norm
    offset = gen.normal(size=spec.channels)
    offset = offset / max(np.linalg.norm(offset), 1e-12)
    return skew, offset


def mixing_matrix(skew: np.ndarray, s: float) -> np.ndarray:
    """Geodesic from the identity (s = 0) to the seeded rotation (s = 1)."""
    if s == 0:
        return np.eye(len(skew))
    return expm(s * skew)


def generate_dataset(spec: SyntheticSpec) -> SensorDataset:
    """Deterministic shift-controllable dataset; records ordered by (context, class, sample)."""
    for key, value in (("num_classes", spec.num_classes), ("channels", spec.channels),
                       ("length", spec.length), ("samples_per_cell", spec.samples_per_cell)):
        if value <= 0:
            raise ConfigurationError(f"must be positive, got {value}", key=f"data.{key}")
    names = [c.name for c in spec.contexts]
    if len(set(names)) != len(names):
        raise ConfigurationError("context names must be unique", key="data.contexts")

    templates, phases = class_templates(spec), class_phases(spec)
    skew, offset = mixing_generator(spec)
    root = RngState(spec.seed, STREAM_DATA, path=(3,))
    segments, labels, context_ids = [], [], []
    for ci, ctx in enumerate(spec.contexts):
        mix = ctx.gain * mixing_matrix(skew, ctx.shift)
        bias = ctx.shift * offset
        for k in range(spec.num_classes):
            for i in range(spec.samples_per_cell):
                gen = root.child(ci).child(k).generator_at(i)
                base = clean_signal(spec, templates, phases, k, gen)
                x = mix @ base + bias[:, None]
                if ctx.noise > 0:
                    x = x + gen.normal(0.0, ctx.noise, x.shape)
                segments.append(x.astype(np.float32))
                labels.append(k)
                context_ids.append(ctx.name)
        logger.debug(f"generated context {ctx.name} (s={ctx.shift})")

    return SensorDataset(
        segments=np.stack(segments), labels=np.asarray(labels, dtype=np.int64), context_ids=context_ids,
        descriptions={c.name: c.description for c in spec.contexts}, spec=spec,
    )


# --- sensor-only backbone for C_m ------------------------------------------------

BASELINE_OPTIMIZER = OptimizerConfig(lr=1e-3, max_epochs=30, patience=5)


class SensorBaseline(nn.Module):
    """Sensor encoder plus linear classifier trained end to end."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.encoder = SensorEncoder(dims)
        self.classifier = nn.Linear(dims.latent, dims.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.encoder(x))


@torch.no_grad()
def baseline_accuracy(model: SensorBaseline, dataset: SensorDataset, batch_size: int = 512) -> float:
    if len(dataset) == 0:
        raise ContractViolation("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        logits = model(as_tensor(dataset.segments[start:start + batch_size]))
        correct += int((logits.argmax(dim=1).numpy() == dataset.labels[start:start + batch_size]).sum())
    return correct / len(dataset)


def train_sensor_baseline(dataset: SensorDataset, dims: ModelDims, rng: RngState,
                          optimizer: OptimizerConfig = BASELINE_OPTIMIZER,
                          val_fraction: float = 0.1) -> Tuple[SensorBaseline, TrainingReport]:
    """Fresh sensor encoder + classifier on labeled source data, early-stopped on validation CE."""
    train_idx, val_idx = split_indices(len(dataset), val_fraction, rng.fork(STREAM_SPLIT))
    if len(val_idx) == 0:
        val_idx = train_idx
    model = init_parameters(SensorBaseline(dims), rng.fork(STREAM_INIT))
    store = ParamStore.from_modules(model)
    shuffle = rng.fork(STREAM_SAMPLING)
    x_all = as_tensor(dataset.segments)
    y_all = torch.as_tensor(dataset.labels, dtype=torch.int64)

    def val_loss() -> float:
        with torch.no_grad():
            return float(F.cross_entropy(model(x_all[val_idx]).to(torch.float64), y_all[val_idx]))

    report = TrainingReport(extra={"train_size": len(train_idx), "val_size": len(val_idx)})
    report.best_epoch, report.best_value = 0, val_loss()
    best_state = copy.deepcopy(model.state_dict())
    report.stop_reason = "max_epochs"
    stale = 0
    for epoch in range(1, optimizer.max_epochs + 1):
        for pos in epoch_batches(len(train_idx), optimizer.batch_size, shuffle, optimizer.steps_per_epoch):
            idx = train_idx[pos]
            loss = F.cross_entropy(model(x_all[idx]).to(torch.float64), y_all[idx])
            grads = forward_backward(loss, store.params)
            adamw_step(store, grads, optimizer.lr, optimizer.betas, optimizer.eps, optimizer.weight_decay)
        value = val_loss()
        report.history.append({"epoch": epoch, "val_L_CE": value})
        if value < report.best_value:
            report.best_epoch, report.best_value = epoch, value
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= optimizer.patience:
                report.stop_reason = "early_stop"
                break
    model.load_state_dict(best_state)
    return model, report


def estimate_cm(baseline: SensorBaseline, dataset: SensorDataset, report: ShiftReport,
                weak_threshold: float = 0.25, strong_threshold: float = 0.45) -> ShiftReport:
    """Fill perf_low / perf_high / C_m / regime from sensor-only accuracy on the Low and High tiers."""
    low, high = tier_contexts(report, "Low"), tier_contexts(report, "High")
    report.perf_low = baseline_accuracy(baseline, dataset.select_contexts(low))
    report.perf_high = baseline_accuracy(baseline, dataset.select_contexts(high))
    report.cm = compute_cm(report.perf_low, report.perf_high)
    report.regime = select_regime(report.cm, weak_threshold, strong_threshold).name
    logger.info(f"Perf_Low={report.perf_low:.3f} Perf_High={report.perf_high:.3f} "
                f"C_m={report.cm:.3f} -> {report.regime} regime")
    return report
