"""
Stage-2 Adaptive Head
=====================
Gate features, the two-way controller, branch projections, fusion and the
classifier, plus the customization loss and its training loop over frozen
encoders.

Methods share one head class and differ only in fusion mode and gate mask:

    chorus / c1c2     gated fusion, full gate features
    align_only        gated fusion, alignment features only
    dyn_only          gated fusion, dynamics features only
    sensor_only       sensor branch alone (alpha fixed at [1, 0])
    fix_add           (h_sensor + h_context) / 2
    fix_concat / c1   classifier over [h_sensor || h_context]
"""

import copy
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from general.encoders import ChorusEncoders, context_table, frozen_embeddings
from general.errors import ConfigurationError, ContractViolation
from general.models import CustomizeConfig, GateDecision, ModelDims, SensorDataset, TrainingReport
from general.numerics import (STREAM_DROPOUT, STREAM_INIT, STREAM_SAMPLING, STREAM_SPLIT, ParamStore,
                              RngState, adamw_step, as_tensor, dropout, epoch_batches, forward_backward,
                              init_parameters, tensor_digest)
from general.process import batch_cosine

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6

# method -> (fusion mode, gate mask)
METHODS: Dict[str, Tuple[str, str]] = {
    "chorus": ("gated", "full"),
    "c1c2": ("gated", "full"),
    "align_only": ("gated", "align"),
    "dyn_only": ("gated", "dyn"),
    "sensor_only": ("sensor", "none"),
    "fix_add": ("add", "none"),
    "fix_concat": ("concat", "none"),
    "c1": ("concat", "none"),
}


@dataclass
class GateStats:
    """Per-feature standardization captured on the labeled training split."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, raw: torch.Tensor) -> "GateStats":
        values = raw.detach().to(torch.float64).numpy()
        return cls(values.mean(axis=0), np.maximum(values.std(axis=0), STD_FLOOR))

    @classmethod
    def identity(cls, size: int) -> "GateStats":
        return cls(np.zeros(size), np.ones(size))

    def apply(self, raw: torch.Tensor) -> torch.Tensor:
        mean = torch.as_tensor(self.mean, dtype=raw.dtype)
        std = torch.as_tensor(np.maximum(self.std, STD_FLOOR), dtype=raw.dtype)
        return (raw - mean) / std

    def to_dict(self) -> Dict[str, list]:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> "GateStats":
        return cls(np.asarray(data["mean"], dtype=np.float64), np.asarray(data["std"], dtype=np.float64))


def feature_mask(mask: str, channels: int) -> torch.Tensor:
    """1/0 weights over [cos, ||z_x||, means(C), stds(C), global norm]."""
    size = 2 + 2 * channels + 1
    weights = torch.ones(size)
    if mask == "align":
        weights[2:] = 0.0
    elif mask == "dyn":
        weights[:2] = 0.0
    elif mask not in ("full", "none"):
        raise ConfigurationError(f"unknown gate mask '{mask}'", key="customize.gate_mask")
    return weights


def raw_gate_features(z_x: torch.Tensor, z_c: torch.Tensor, segments: torch.Tensor) -> torch.Tensor:
    """Unstandardized gate features for a batch (B, 2 + 2C + 1)."""
    if z_x.shape != z_c.shape:
        raise ContractViolation(f"z_x {tuple(z_x.shape)} and z_c {tuple(z_c.shape)} differ")
    if segments.dim() != 3 or len(segments) != len(z_x):
        raise ContractViolation("segments must be (B, C, T) aligned with the embeddings")
    segments = segments.to(z_x.dtype)
    cos = batch_cosine(z_x, z_c).unsqueeze(1)
    norm = z_x.norm(dim=1, keepdim=True)
    means = segments.mean(dim=2)
    stds = segments.std(dim=2, unbiased=False)
    global_norm = segments.flatten(1).norm(dim=1, keepdim=True)
    return torch.cat([cos, norm, means, stds, global_norm], dim=1)


def gate_features(z_x, z_c, segment, stats: Optional[GateStats] = None, mask: str = "full") -> torch.Tensor:
    """Standardized (and masked) gate features; accepts one sample or a batch."""
    z_x, z_c, segment = (t if isinstance(t, torch.Tensor) else as_tensor(t) for t in (z_x, z_c, segment))
    single = z_x.dim() == 1
    if single:
        z_x, z_c, segment = z_x.unsqueeze(0), z_c.unsqueeze(0), segment.unsqueeze(0)
    raw = raw_gate_features(z_x, z_c, segment)
    r = stats.apply(raw) if stats is not None else raw
    r = r * feature_mask(mask, segment.shape[1]).to(r.dtype)
    return r[0] if single else r


def gate_weights(r: torch.Tensor, controller: nn.Module) -> torch.Tensor:
    """alpha = softmax(g_c(r)); rows are [alpha_sensor, alpha_context]."""
    expected = controller[0].in_features
    if r.shape[-1] != expected:
        raise ContractViolation(f"gate features have length {r.shape[-1]}, controller expects {expected}")
    return torch.softmax(controller(r.to(controller[0].weight.dtype)), dim=-1)


class ChorusHead(nn.Module):
    """Projections, controller and classifier trained in stage 2."""

    def __init__(self, dims: ModelDims, method: str = "chorus", dropout_rate: float = 0.3):
        super().__init__()
        if method not in METHODS:
            raise ConfigurationError(f"unknown method '{method}'", key="customize.method")
        self.dims = dims
        self.method = method
        self.mode, self.mask = METHODS[method]
        self.dropout_rate = dropout_rate
        self.gate_stats: Optional[GateStats] = None

        self.sensor_proj = nn.Linear(dims.latent, dims.hidden)
        self.context_proj = nn.Linear(dims.latent, dims.hidden) if self.mode != "sensor" else None
        self.controller = nn.Sequential(
            nn.Linear(dims.gate_features, dims.controller_hidden),
            nn.ReLU(),
            nn.Linear(dims.controller_hidden, 2),
        ) if self.mode == "gated" else None
        width = 2 * dims.hidden if self.mode == "concat" else dims.hidden
        self.classifier = nn.Linear(width, dims.num_classes)

    @property
    def gated(self) -> bool:
        return self.mode == "gated"

    @classmethod
    def initialized(cls, dims: ModelDims, method: str, dropout_rate: float, rng: RngState) -> "ChorusHead":
        return init_parameters(cls(dims, method, dropout_rate), rng)

    def context_branch(self, z_c: torch.Tensor) -> Optional[torch.Tensor]:
        """Inference-mode context projection; None for heads without a context branch."""
        if self.context_proj is None:
            return None
        return F.relu(self.context_proj(z_c.to(self.classifier.weight.dtype)))

    def forward(self, z_x: torch.Tensor, z_c: torch.Tensor, raw_features: Optional[torch.Tensor] = None,
                rng: Optional[RngState] = None, training: bool = False,
                h_context: Optional[torch.Tensor] = None) -> GateDecision:
        dtype = self.classifier.weight.dtype
        z_x, z_c = z_x.to(dtype), z_c.to(dtype)
        h_s = dropout(F.relu(self.sensor_proj(z_x)), self.dropout_rate, rng, training)
        if h_context is not None and not training:
            h_c = h_context.to(dtype).expand_as(h_s)
        elif self.context_proj is not None:
            h_c = dropout(F.relu(self.context_proj(z_c)), self.dropout_rate, rng, training)
        else:
            h_c = torch.zeros_like(h_s)
        batch = len(z_x)

        if self.mode == "gated":
            if raw_features is None:
                raise ContractViolation("gated fusion needs gate features")
            stats = self.gate_stats or GateStats.identity(self.dims.gate_features)
            r = stats.apply(raw_features.to(dtype)) * feature_mask(self.mask, self.dims.channels).to(dtype)
            alpha = gate_weights(r, self.controller)
            h_final = alpha[:, :1] * h_s + alpha[:, 1:] * h_c
        elif self.mode == "sensor":
            alpha = torch.tensor([[1.0, 0.0]], dtype=dtype).expand(batch, 2)
            h_final = h_s
        elif self.mode == "add":
            alpha = torch.full((batch, 2), 0.5, dtype=dtype)
            h_final = 0.5 * (h_s + h_c)
        else:
            alpha = torch.full((batch, 2), 0.5, dtype=dtype)
            h_final = torch.cat([h_s, h_c], dim=1)

        logits = self.classifier(h_final)
        return GateDecision(alpha=alpha, h_sensor=h_s, h_context=h_c, h_final=h_final,
                            logits=logits, y_hat=torch.argmax(logits, dim=1))


def fuse_and_classify(z_x, z_c, segment, head: ChorusHead, rng: Optional[RngState] = None,
                      training: bool = False, h_context: Optional[torch.Tensor] = None) -> GateDecision:
    """Full head forward from frozen encoder outputs and the raw segment(s).

    ``h_context`` is a cached ``head.context_branch(z_c)``; it is only used at inference.
    """
    z_x, z_c, segment = (t if isinstance(t, torch.Tensor) else as_tensor(t) for t in (z_x, z_c, segment))
    if z_x.dim() == 1:
        z_x, z_c, segment = z_x.unsqueeze(0), z_c.unsqueeze(0), segment.unsqueeze(0)
    raw = raw_gate_features(z_x, z_c, segment) if head.gated else None
    return head(z_x, z_c, raw, rng=rng, training=training, h_context=h_context)


def balance_loss(alpha: torch.Tensor, num_branches: Optional[int] = None) -> torch.Tensor:
    """K * sum_k (mean alpha_k - 1/K)^2 over the batch."""
    if alpha.dim() != 2 or len(alpha) == 0:
        raise ContractViolation("balance loss needs a non-empty (B, K) batch of gate weights")
    k = num_branches or alpha.shape[1]
    usage = alpha.to(torch.float64).mean(dim=0)
    return k * ((usage - 1.0 / k) ** 2).sum()


def customize_loss(decision: GateDecision, labels, lambda_balance: float = 0.01,
                   gated: bool = True) -> Tuple[torch.Tensor, Dict[str, float]]:
    """L_custom = CE(logits, y) + lambda_balance * L_balance (balance only for gated heads)."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    k = decision.logits.shape[1]
    if len(labels) != len(decision.logits):
        raise ContractViolation("one label per decision is required")
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise ContractViolation(f"labels must lie in [0, {k})")
    ce = F.cross_entropy(decision.logits.to(torch.float64), labels)
    bal = balance_loss(decision.alpha) if gated else torch.zeros((), dtype=torch.float64)
    total = ce + lambda_balance * bal if lambda_balance else ce
    return total, {"L_CE": float(ce), "L_balance": float(bal), "L_custom": float(total)}


@dataclass
class HeadInputs:
    """Frozen-encoder outputs and raw gate features for a set of samples."""
    z_x: torch.Tensor
    z_c: torch.Tensor
    raw: torch.Tensor
    labels: np.ndarray

    def take(self, idx) -> "HeadInputs":
        return HeadInputs(self.z_x[idx], self.z_c[idx], self.raw[idx], self.labels[idx])


def head_inputs(encoders: ChorusEncoders, dataset: SensorDataset) -> HeadInputs:
    table = context_table(dataset.descriptions, encoders.dims.text_dim)
    z_x, mu_c = frozen_embeddings(encoders, dataset.segments, dataset.context_ids, table)
    raw = raw_gate_features(z_x, mu_c, as_tensor(dataset.segments))
    return HeadInputs(z_x, mu_c, raw, np.asarray(dataset.labels, dtype=np.int64))


@torch.no_grad()
def predict(head: ChorusHead, inputs: HeadInputs, batch_size: int = 512) -> GateDecision:
    """Inference-mode decisions for every sample."""
    parts = [head(inputs.z_x[i:i + batch_size], inputs.z_c[i:i + batch_size], inputs.raw[i:i + batch_size])
             for i in range(0, len(inputs.labels), batch_size)]
    return GateDecision(*(torch.cat([getattr(p, f) for p in parts]) for f in
                          ("alpha", "h_sensor", "h_context", "h_final", "logits", "y_hat")))


def stratified_split(labels: np.ndarray, val_fraction: float, rng: RngState) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; classes with one sample stay in training."""
    train, val = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(len(idx) * val_fraction)) if len(idx) > 1 else 0
        n_val = min(n_val, len(idx) - 1)
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(val, dtype=np.int64))


def run_customize(encoders: ChorusEncoders, labeled: SensorDataset, config: CustomizeConfig,
                  rng: RngState, method: Optional[str] = None) -> Tuple[ChorusHead, TrainingReport]:
    """Train a head for ``method`` over frozen encoders on a labeled subset."""
    dims = encoders.dims
    method = method or config.method
    if len(labeled) < dims.num_classes:
        raise ConfigurationError(
            f"{len(labeled)} labeled samples is fewer than K={dims.num_classes}", key="customize.budget")

    for p in encoders.parameters():
        p.requires_grad_(False)
    digest_before = tensor_digest(encoders.state_dict())

    inputs = head_inputs(encoders, labeled)
    train_idx, val_idx = stratified_split(inputs.labels, config.val_fraction, rng.fork(STREAM_SPLIT))
    if len(val_idx) == 0:
        val_idx = train_idx
    train, val = inputs.take(train_idx), inputs.take(val_idx)

    head = ChorusHead.initialized(dims, method, config.dropout, rng.fork(STREAM_INIT))
    head.gate_stats = GateStats.fit(train.raw) if head.gated else None
    store = ParamStore.from_modules(head)
    opt = config.optimizer
    dropout_rng = rng.fork(STREAM_DROPOUT)
    shuffle = rng.fork(STREAM_SAMPLING)

    report = TrainingReport(extra={"method": method, "gate_mask": head.mask, "fusion": head.mode,
                                   "train_size": len(train_idx), "val_size": len(val_idx)})

    def validate() -> Dict[str, float]:
        with torch.no_grad():
            _, comps = customize_loss(head(val.z_x, val.z_c, val.raw), val.labels,
                                      config.lambda_balance, head.gated)
        return comps

    best = validate()
    report.history.append({"epoch": 0, **{f"val_{k}": v for k, v in best.items()}})
    report.best_epoch, report.best_value = 0, best["L_custom"]
    best_state = copy.deepcopy(head.state_dict())
    report.stop_reason = "max_epochs" if opt.max_epochs else "no_epochs"
    stale = 0

    logger.info(f"Customizing {method} head on {len(train_idx)} labeled samples")
    for epoch in range(1, opt.max_epochs + 1):
        sums: Dict[str, float] = {}
        alpha_sum = np.zeros(2)
        seen = steps = 0
        for idx in epoch_batches(len(train_idx), opt.batch_size, shuffle, opt.steps_per_epoch):
            seen, steps = seen + len(idx), steps + 1
            batch = train.take(idx)
            decision = head(batch.z_x, batch.z_c, batch.raw, rng=dropout_rng, training=True)
            loss, comps = customize_loss(decision, batch.labels, config.lambda_balance, head.gated)
            grads = forward_backward(loss, store.params)
            adamw_step(store, grads, opt.lr, opt.betas, opt.eps, opt.weight_decay)
            for key, value in comps.items():
                sums[key] = sums.get(key, 0.0) + value * len(idx)
            alpha_sum += decision.alpha.detach().to(torch.float64).sum(dim=0).numpy()
        comps = validate()
        report.history.append({
            "epoch": epoch,
            **{f"train_{k}": v / seen for k, v in sums.items()},
            **{f"val_{k}": v for k, v in comps.items()},
            "alpha_sensor": float(alpha_sum[0] / seen),
            "alpha_context": float(alpha_sum[1] / seen),
            "steps": steps,
        })
        if comps["L_custom"] < report.best_value:
            report.best_epoch, report.best_value = epoch, comps["L_custom"]
            best_state = copy.deepcopy(head.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= opt.patience:
                report.stop_reason = "early_stop"
                break

    head.load_state_dict(best_state)
    digest_after = tensor_digest(encoders.state_dict())
    if digest_after != digest_before:
        raise ContractViolation("encoder parameters changed during customization")
    report.extra["encoder_digest"] = digest_after
    logger.info(f"✅ {method} head done: best epoch {report.best_epoch}, val L_custom {report.best_value:.4f}")
    return head, report
