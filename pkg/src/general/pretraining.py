"""
Stage-1 Pre-training
====================
Cross-modal reconstruction plus latent regularization of the context
posterior, trained with AdamW and early stopping on validation L_pre.
"""

import copy
import logging
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from general.encoders import (ChorusEncoders, context_features_for, context_table,
                              decode_context, decode_sensor, encode_batch)
from general.errors import ConfigurationError, ContractViolation
from general.models import ModelDims, OptimizerConfig, RegimeConfig, SensorDataset, TrainingReport
from general.numerics import (STREAM_INIT, STREAM_SAMPLING, STREAM_SPLIT, ParamStore, RngState,
                              adamw_step, as_tensor, batch_slices, epoch_batches, forward_backward)

logger = logging.getLogger(__name__)

REGIME_PRESETS = {
    "weak": {"lam": 0.0, "gamma": 0.0},
    "medium": {"lam": 1e-2, "gamma": 0.0},
    "strong": {"lam": 1e-2, "gamma": 0.5},
}


def make_regime(name: str, lam: Optional[float] = None, gamma: Optional[float] = None,
                lambda_xc: float = 1.0, lambda_cx: float = 1.0) -> RegimeConfig:
    """Regime by name; weak ignores lam/gamma, medium forces gamma = 0."""
    if name not in REGIME_PRESETS:
        raise ConfigurationError(f"unknown regime '{name}' (expected weak, medium or strong)", key="regime")
    preset = dict(REGIME_PRESETS[name])
    if name != "weak" and lam is not None:
        preset["lam"] = lam
    if name == "strong" and gamma is not None:
        preset["gamma"] = gamma
    try:
        return RegimeConfig(name=name, lambda_xc=lambda_xc, lambda_cx=lambda_cx, **preset)
    except ValueError as e:
        raise ConfigurationError(str(e), key="regime") from e


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements, accumulated in float64."""
    return ((pred - target) ** 2).mean(dtype=torch.float64)


def recon_loss(z_x: torch.Tensor, z_c: torch.Tensor, x: torch.Tensor, c: torch.Tensor,
               model: ChorusEncoders, lambda_xc: float = 1.0, lambda_cx: float = 1.0):
    """(L_xc, L_cx, L_recon) for a batch."""
    if len(z_x) == 0:
        raise ContractViolation("reconstruction loss needs a non-empty batch")
    if not (len(z_x) == len(z_c) == len(x) == len(c)):
        raise ContractViolation("batch sizes of z_x, z_c, x and c must match")
    l_xc = mse(decode_context(z_x, model), c.to(z_x.dtype))
    l_cx = mse(decode_sensor(z_c, model), x.to(z_c.dtype))
    return l_xc, l_cx, lambda_xc * l_xc + lambda_cx * l_cx


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I))."""
    if mu.shape != logvar.shape:
        raise ContractViolation("mu and logvar shapes differ")
    mu, logvar = mu.to(torch.float64), logvar.to(torch.float64)
    per_sample = 0.5 * (mu ** 2 + torch.exp(logvar) - 1.0 - logvar).sum(dim=-1)
    return per_sample.mean()


class SupConResult(NamedTuple):
    loss: torch.Tensor
    anchors: int
    warning: bool


def supcon_loss(z: torch.Tensor, labels: Sequence, tau: float = 0.1) -> SupConResult:
    """Supervised contrastive loss over L2-normalized embeddings.

    Anchors without positives are skipped; if every anchor is skipped the
    loss is 0 and ``warning`` is set.
    """
    if len(z) < 2:
        raise ContractViolation("contrastive loss needs a batch of at least 2")
    if tau <= 0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    labels = torch.as_tensor(np.unique(np.asarray(labels), return_inverse=True)[1].reshape(-1))
    n = len(z)
    normed = F.normalize(z.to(torch.float64), dim=1)
    sim = normed @ normed.T / tau
    self_mask = torch.eye(n, dtype=torch.bool)
    lse = torch.logsumexp(sim.masked_fill(self_mask, float("-inf")), dim=1)
    log_prob = sim - lse[:, None]
    positives = (labels[:, None] == labels[None, :]) & ~self_mask
    counts = positives.sum(dim=1)
    contributing = counts > 0
    anchors = int(contributing.sum())
    if anchors == 0:
        logger.warning("contrastive batch has no positive pairs; L_con = 0")
        return SupConResult(sim.sum() * 0.0, 0, True)
    pos_sum = torch.where(positives, log_prob, torch.zeros_like(log_prob)).sum(dim=1)
    per_anchor = -pos_sum[contributing] / counts[contributing].to(torch.float64)
    return SupConResult(per_anchor.mean(), anchors, False)


def pretrain_loss(segments: torch.Tensor, context_features: torch.Tensor, context_labels: Sequence,
                  model: ChorusEncoders, regime: RegimeConfig, tau: float = 0.1,
                  rng: Optional[RngState] = None, noise: Optional[torch.Tensor] = None,
                  training: bool = True) -> Tuple[torch.Tensor, Dict[str, float]]:
    """L_pre = L_recon + lam * (L_KL + gamma * L_con), with components."""
    pair = encode_batch(model, segments, context_features, rng=rng, training=training, noise=noise)
    l_xc, l_cx, l_recon = recon_loss(pair.z_x, pair.z_c, segments, context_features, model,
                                     regime.lambda_xc, regime.lambda_cx)
    l_kl = kl_loss(pair.mu_c, pair.logvar_c)
    con = supcon_loss(pair.z_c, context_labels, tau) if len(segments) >= 2 else None
    l_con = con.loss if con is not None else torch.zeros((), dtype=torch.float64)

    if regime.lam == 0:
        total = l_recon
    elif regime.gamma == 0:
        total = l_recon + regime.lam * l_kl
    else:
        total = l_recon + regime.lam * (l_kl + regime.gamma * l_con)

    components = {
        "L_xc": l_xc.detach().item(), "L_cx": l_cx.detach().item(), "L_recon": l_recon.detach().item(),
        "L_KL": l_kl.detach().item(), "L_con": l_con.detach().item(), "L_pre": total.detach().item(),
    }
    return total, components


def split_indices(n: int, val_fraction: float, rng: RngState) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


class _PretrainData:
    def __init__(self, dataset: SensorDataset, dims: ModelDims):
        table = context_table(dataset.descriptions, dims.text_dim)
        names = sorted(table)
        self.segments = as_tensor(dataset.segments)
        self.features = context_features_for(dataset.context_ids, table)
        self.labels = np.array([names.index(c) for c in dataset.context_ids], dtype=np.int64)


@torch.no_grad()
def evaluate_pretrain(model: ChorusEncoders, data: _PretrainData, indices: np.ndarray,
                      regime: RegimeConfig, tau: float, batch_size: int = 256) -> Dict[str, float]:
    """Inference-mode (z_c = mu) loss components averaged over ``indices``."""
    totals: Dict[str, float] = {}
    weight = 0
    for idx in batch_slices(indices, batch_size):
        _, comps = pretrain_loss(data.segments[idx], data.features[idx], data.labels[idx],
                                 model, regime, tau, training=False)
        for key, value in comps.items():
            totals[key] = totals.get(key, 0.0) + value * len(idx)
        weight += len(idx)
    return {k: v / max(weight, 1) for k, v in totals.items()}


def run_pretrain(dataset: SensorDataset, regime: RegimeConfig, optimizer: OptimizerConfig,
                 rng: RngState, dims: Optional[ModelDims] = None, tau: float = 0.1,
                 val_fraction: float = 0.1) -> Tuple[ChorusEncoders, TrainingReport]:
    """Train encoders and decoders on unlabeled sensor-context pairs."""
    dims = dims or ModelDims()
    if len(dataset.contexts) < 2:
        if regime.name == "strong":
            logger.warning("single-context dataset with strong regime: contrastive term is degenerate")
        else:
            logger.warning("pre-training on a single context")

    data = _PretrainData(dataset, dims)
    train_idx, val_idx = split_indices(len(dataset), val_fraction, rng.fork(STREAM_SPLIT))
    if len(val_idx) == 0:
        val_idx = train_idx
    model = ChorusEncoders.initialized(dims, rng.fork(STREAM_INIT))
    store = ParamStore.from_modules(model)
    sampling = rng.fork(STREAM_SAMPLING)

    report = TrainingReport(extra={"regime": regime.name, "train_size": len(train_idx),
                                   "val_size": len(val_idx)})
    initial = evaluate_pretrain(model, data, val_idx, regime, tau)
    report.history.append({"epoch": 0, **{f"train_{k}": v for k, v in
                                          evaluate_pretrain(model, data, train_idx, regime, tau).items()},
                           **{f"val_{k}": v for k, v in initial.items()}})
    report.best_epoch, report.best_value = 0, initial["L_pre"]
    best_state = copy.deepcopy(model.state_dict())
    report.stop_reason = "max_epochs"
    stale = 0

    logger.info(f"Pre-training ({regime.name}) on {len(train_idx)} pairs, validating on {len(val_idx)}")
    for epoch in range(1, optimizer.max_epochs + 1):
        sums: Dict[str, float] = {}
        seen = 0
        for pos in epoch_batches(len(train_idx), optimizer.batch_size, sampling, optimizer.steps_per_epoch):
            idx = train_idx[pos]
            seen += len(idx)
            loss, comps = pretrain_loss(data.segments[idx], data.features[idx], data.labels[idx],
                                        model, regime, tau, rng=sampling, training=True)
            grads = forward_backward(loss, store.params)
            adamw_step(store, grads, optimizer.lr, optimizer.betas, optimizer.eps, optimizer.weight_decay)
            for key, value in comps.items():
                sums[key] = sums.get(key, 0.0) + value * len(idx)
        val = evaluate_pretrain(model, data, val_idx, regime, tau)
        report.history.append({"epoch": epoch,
                               **{f"train_{k}": v / seen for k, v in sums.items()},
                               **{f"val_{k}": v for k, v in val.items()}})
        logger.debug(f"epoch {epoch}: val L_pre={val['L_pre']:.5f} L_recon={val['L_recon']:.5f}")

        if val["L_pre"] < report.best_value:
            report.best_epoch, report.best_value = epoch, val["L_pre"]
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= optimizer.patience:
                report.stop_reason = "early_stop"
                logger.info(f"Early stop at epoch {epoch}; best epoch {report.best_epoch}")
                break

    if optimizer.max_epochs == 0:
        report.stop_reason = "no_epochs"
    model.load_state_dict(best_state)
    return model, report
