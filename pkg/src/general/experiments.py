"""
Experiment Orchestration
========================
Source-only protocol over synthetic data: per seed generate, tier, pick a
regime, pre-train, customize every method on the same labeled subset and
evaluate on the held-out target contexts. Also the context-embedding probe,
gate diagnostics and the budget / sensitivity sweeps.
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy.spatial.distance import cdist
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import silhouette_score

from general.encoders import ChorusEncoders, context_table, frozen_embeddings
from general.errors import ConfigurationError, ContractViolation, error_record
from general.gating import METHODS, head_inputs, predict, run_customize, stratified_split
from general.models import (CustomizeConfig, ModelDims, PretrainConfig, RunConfig, SensorDataset,
                            ShiftConfig, ShiftReport, SyntheticSpec)
from general.numerics import STREAM_PROBE, STREAM_SPLIT, RngState
from general.pretraining import make_regime, run_pretrain
from general.process import classification_metrics
from general.shiftlab import build_tiers, estimate_cm, generate_dataset, train_sensor_baseline

logger = logging.getLogger(__name__)

METHOD_ORDER = ["chorus", "sensor_only", "fix_add", "fix_concat", "align_only", "dyn_only", "c1", "c1c2"]
WEAK_REGIME_METHODS = {"c1", "c1c2"}
METRICS = ["accuracy", "f1", "precision", "recall"]


@dataclass
class ExperimentPlan:
    spec: SyntheticSpec
    source_contexts: List[str]
    target_contexts: List[str]
    budget: float = 0.01
    methods: List[str] = field(default_factory=lambda: list(METHOD_ORDER))
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    regime: Optional[str] = None
    dims: ModelDims = field(default_factory=ModelDims)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    customize: CustomizeConfig = field(default_factory=CustomizeConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    pretrain_fraction: float = 0.8
    workers: int = 1

    def __post_init__(self):
        overlap = set(self.source_contexts) & set(self.target_contexts)
        if overlap:
            raise ContractViolation(f"target contexts {sorted(overlap)} are also source contexts")
        if not (0.0 < self.budget <= 1.0):
            raise ConfigurationError(f"label budget must lie in (0, 1], got {self.budget}", key="experiment.budget")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigurationError(f"unknown methods {unknown}", key="experiment.methods")
        if self.regime not in (None, "weak", "medium", "strong"):
            raise ConfigurationError(f"unknown regime '{self.regime}'", key="pretrain.regime")

    @classmethod
    def from_config(cls, config: RunConfig) -> "ExperimentPlan":
        return cls(
            spec=config.data,
            source_contexts=list(config.shift.source_contexts),
            target_contexts=list(config.shift.target_contexts),
            budget=config.experiment.budget,
            methods=list(config.experiment.methods),
            seeds=list(config.experiment.seeds),
            regime=None if config.pretrain.regime == "auto" else config.pretrain.regime,
            dims=config.model,
            pretrain=config.pretrain,
            customize=config.customize,
            shift=config.shift,
            pretrain_fraction=config.experiment.pretrain_fraction,
            workers=config.experiment.workers,
        )


class TargetVault:
    """Holds the held-out target data; any read while training is counted and refused."""

    def __init__(self, dataset: SensorDataset):
        self._dataset = dataset
        self.training = False
        self.training_reads = 0
        self.reads = 0

    def open(self) -> SensorDataset:
        if self.training:
            self.training_reads += 1
            raise ContractViolation("target data requested during training")
        self.reads += 1
        return self._dataset


@dataclass
class ResultTable:
    rows: pd.DataFrame
    samples: pd.DataFrame
    failures: List[dict] = field(default_factory=list)
    shift: Dict[int, dict] = field(default_factory=dict)

    def summary(self) -> pd.DataFrame:
        """Mean and standard deviation of every metric per (method, tier)."""
        if self.rows.empty:
            return pd.DataFrame()
        grouped = self.rows.groupby(["method", "tier"])[METRICS + ["alpha_context"]]
        stats = grouped.agg(["mean", "std"])
        stats.columns = [f"{m}_{s}" for m, s in stats.columns]
        return stats.reset_index()

    def diagnostics(self) -> List[dict]:
        if self.samples.empty:
            return []
        return gate_diagnostics(self.samples)


def budget_subset(labels: np.ndarray, budget: float, rng: RngState, total: Optional[int] = None) -> np.ndarray:
    """Seeded stratified subsample of ``round(budget * total)`` indices (capped at the pool)."""
    if not (0.0 < budget <= 1.0):
        raise ConfigurationError(f"label budget must lie in (0, 1], got {budget}", key="customize.budget")
    labels = np.asarray(labels)
    total = total or len(labels)
    wanted = min(len(labels), max(1, int(round(budget * total))))
    rate = wanted / len(labels)
    chosen = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        take = min(len(idx), int(round(rate * len(idx))))
        if rate * len(idx) >= 1:
            take = max(take, 1)
        chosen.extend(idx[rng.permutation(len(idx))[:take]])
    return np.sort(np.asarray(chosen, dtype=np.int64))


def pretrain_pool_split(source: SensorDataset, plan: ExperimentPlan,
                        seed: int) -> Tuple[SensorDataset, SensorDataset]:
    """(unlabeled pre-training pairs, labeled pool) from source data only."""
    order = RngState(seed, STREAM_SPLIT, path=(0,)).permutation(len(source))
    n_pre = int(round(plan.pretrain_fraction * len(source)))
    return source.subset(np.sort(order[:n_pre])), source.subset(np.sort(order[n_pre:]))


def split_source(source: SensorDataset, plan: ExperimentPlan, seed: int) -> Tuple[SensorDataset, SensorDataset]:
    """(unlabeled pre-training pool, budgeted labeled subset)."""
    unlabeled, pool = pretrain_pool_split(source, plan, seed)
    picked = budget_subset(pool.labels, plan.budget, RngState(seed, STREAM_SPLIT, path=(1,)), total=len(source))
    return unlabeled, pool.subset(picked)


def _evaluate(head, encoders: ChorusEncoders, targets: SensorDataset, report: ShiftReport,
              method: str, seed: int, k: int) -> Tuple[List[dict], List[dict]]:
    inputs = head_inputs(encoders, targets)
    decision = predict(head, inputs)
    y_hat = decision.y_hat.numpy()
    alpha_c = decision.alpha[:, 1].detach().to(torch.float64).numpy()
    tiers = np.array([report.tiers[c] for c in targets.context_ids])
    rows, samples = [], []
    for tier in ("Low", "Mid", "High"):
        mask = tiers == tier
        if not mask.any():
            continue
        metrics = classification_metrics(targets.labels[mask], y_hat[mask], k)
        rows.append({"method": method, "tier": tier, "seed": seed, **metrics,
                     "alpha_context": float(alpha_c[mask].mean()), "n": int(mask.sum())})
    correct = y_hat == targets.labels
    for i in range(len(targets)):
        samples.append({"seed": seed, "method": method, "tier": tiers[i], "sample": i,
                        "context": targets.context_ids[i], "correct": bool(correct[i]),
                        "alpha_context": float(alpha_c[i])})
    return rows, samples


def run_seed(plan: ExperimentPlan, seed: int) -> dict:
    """One seed of the plan; raises on any stage failure."""
    spec = plan.spec.model_copy(update={"seed": seed})
    dataset = generate_dataset(spec)
    source = dataset.select_contexts(plan.source_contexts)
    vault = TargetVault(dataset.select_contexts(plan.target_contexts))

    report = build_tiers(dataset, plan.source_contexts, plan.target_contexts, plan.shift.features,
                         plan.shift.kind, plan.shift.max_points, RngState(seed, STREAM_SPLIT, path=(2,)))
    unlabeled, labeled = split_source(source, plan, seed)
    logger.info(f"[seed {seed}] {len(unlabeled)} unlabeled pairs, {len(labeled)} labeled samples")

    if plan.regime is None:
        _, pool = pretrain_pool_split(source, plan, seed)
        baseline, _ = train_sensor_baseline(pool, plan.dims, RngState(seed, STREAM_SPLIT, path=(3,)))
        estimate_cm(baseline, vault.open(), report, plan.shift.weak_threshold, plan.shift.strong_threshold)
        regime_name = report.regime
    else:
        regime_name = plan.regime
    report.regime = regime_name

    vault.training = True
    needed = {("weak" if m in WEAK_REGIME_METHODS else regime_name) for m in plan.methods}
    encoders: Dict[str, ChorusEncoders] = {}
    for name in sorted(needed):
        regime = make_regime(name, plan.pretrain.lam, plan.pretrain.gamma,
                             plan.pretrain.lambda_xc, plan.pretrain.lambda_cx)
        encoders[name], _ = run_pretrain(unlabeled, regime, plan.pretrain.optimizer,
                                         RngState(seed, path=(10,)), plan.dims, plan.pretrain.tau,
                                         plan.pretrain.val_fraction)
    heads = {}
    for method in plan.methods:
        regime_for = "weak" if method in WEAK_REGIME_METHODS else regime_name
        heads[method], _ = run_customize(encoders[regime_for], labeled, plan.customize,
                                         RngState(seed, path=(20, METHOD_ORDER.index(method))), method)
    vault.training = False
    if vault.training_reads:
        raise ContractViolation(f"{vault.training_reads} target reads during training")

    targets = vault.open()
    rows, samples = [], []
    for method in plan.methods:
        regime_for = "weak" if method in WEAK_REGIME_METHODS else regime_name
        r, s = _evaluate(heads[method], encoders[regime_for], targets, report, method, seed,
                         plan.dims.num_classes)
        for row in r:
            row["regime"] = regime_for
        rows.extend(r)
        samples.extend(s)
    return {"rows": rows, "samples": samples, "shift": report.to_dict()}


def run_plan(plan: ExperimentPlan) -> ResultTable:
    """Run every seed (thread pool over seeds); failed seeds are recorded, not raised."""
    def job(seed: int):
        try:
            return seed, run_seed(plan, seed), None
        except Exception as e:
            logger.error(f"❌ seed {seed} failed: {e}")
            return seed, None, {"seed": seed, **error_record(e)}

    with ThreadPoolExecutor(max_workers=max(1, plan.workers)) as pool:
        outcomes = sorted(pool.map(job, plan.seeds), key=lambda o: o[0])

    rows, samples, failures, shift = [], [], [], {}
    for i, (seed, result, failure) in enumerate(outcomes):
        if failure:
            failures.append(failure)
            continue
        rows.extend(result["rows"])
        samples.extend(result["samples"])
        shift[seed] = result["shift"]
        logger.info(f"Progress: {100 * (i + 1) // len(outcomes)}% - seed {seed} done")
    return ResultTable(pd.DataFrame(rows), pd.DataFrame(samples), failures, shift)


# --- diagnostics -----------------------------------------------------------------

def gate_diagnostics(samples: pd.DataFrame, method: str = "chorus", baseline: str = "sensor_only") -> List[dict]:
    """Mean alpha_context per tier for easy vs hard-but-fixed samples.

    easy: baseline correct. hard-but-fixed: baseline wrong, ``method`` correct.
    Empty groups are reported as None.
    """
    present = set(samples["method"]) if not samples.empty else set()
    if method not in present or baseline not in present:
        raise ContractViolation(f"diagnostics need both {method} and {baseline} rows")
    keys = ["seed", "sample"]
    ours = samples[samples["method"] == method].set_index(keys)
    base = samples[samples["method"] == baseline].set_index(keys)
    joined = ours.join(base[["correct"]], rsuffix="_base", how="inner")

    out = []
    for tier in ("Low", "Mid", "High"):
        part = joined[joined["tier"] == tier]
        if part.empty:
            continue
        easy = part[part["correct_base"]]
        hard = part[~part["correct_base"] & part["correct"]]
        entry = {
            "tier": tier,
            "mean_alpha_context": float(part["alpha_context"].mean()),
            "n_easy": int(len(easy)),
            "n_hard_but_fixed": int(len(hard)),
            "easy": float(easy["alpha_context"].mean()) if len(easy) else None,
            "hard_but_fixed": float(hard["alpha_context"].mean()) if len(hard) else None,
        }
        if entry["hard_but_fixed"] is None:
            logger.warning(f"no hard-but-fixed samples in tier {tier}")
        out.append(entry)
    return out


@dataclass
class ProbeResult:
    contexts: List[str]
    accuracy: Optional[float]
    silhouette: Optional[float]
    centroid_distances: pd.DataFrame
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "contexts": self.contexts, "accuracy": self.accuracy, "silhouette": self.silhouette,
            "centroid_distances": self.centroid_distances.round(12).values.tolist(), "flags": self.flags,
        }


def probe_embeddings(embeddings: np.ndarray, context_ids: Sequence[str], rng: RngState) -> ProbeResult:
    """Linear probe, silhouette and centroid distances over per-sample context embeddings."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    names = sorted(set(context_ids))
    labels = np.array([names.index(c) for c in context_ids])
    centroids = np.stack([embeddings[labels == i].mean(axis=0) for i in range(len(names))])
    distances = pd.DataFrame(cdist(centroids, centroids), index=names, columns=names)
    flags: List[str] = []
    if len(names) < 2:
        logger.warning("probe needs at least 2 contexts; reporting diagnostics only")
        return ProbeResult(names, None, None, distances, ["single_context"])

    if np.allclose(embeddings, embeddings[0]):
        flags.append("degenerate_embeddings")
        silhouette = 0.0
    else:
        silhouette = float(silhouette_score(embeddings, labels, metric="euclidean"))

    train_idx, test_idx = stratified_split(labels, 0.2, rng)
    if len(test_idx) == 0 or len(np.unique(labels[train_idx])) < 2:
        flags.append("probe_split_degenerate")
        return ProbeResult(names, None, silhouette, distances, flags)
    probe = LogisticRegression(max_iter=1000)
    probe.fit(embeddings[train_idx], labels[train_idx])
    accuracy = float((probe.predict(embeddings[test_idx]) == labels[test_idx]).mean())
    return ProbeResult(names, accuracy, silhouette, distances, flags)


def probe_context_embeddings(encoders: ChorusEncoders, dataset: SensorDataset, seed: int = 0) -> ProbeResult:
    """Probe frozen mu_c vectors of ``dataset`` against their context labels."""
    table = context_table(dataset.descriptions, encoders.dims.text_dim)
    _, mu_c = frozen_embeddings(encoders, dataset.segments, dataset.context_ids, table)
    return probe_embeddings(mu_c.numpy(), dataset.context_ids, RngState(seed, STREAM_PROBE))


# --- sweeps --------------------------------------------------------------------

def run_budget_sweep(plan: ExperimentPlan, budgets: Sequence[float] = (0.01, 0.02, 0.05, 0.1)) -> pd.DataFrame:
    """Rerun the plan per label budget; long-format rows with a ``budget`` column."""
    frames = []
    for budget in budgets:
        table = run_plan(dataclasses.replace(plan, budget=budget))
        if not table.rows.empty:
            frames.append(table.rows.assign(budget=budget))
        logger.info(f"budget {budget:.0%}: {len(table.failures)} failed seeds")
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


SENSITIVITY_AXES = {
    "batch_size": (16, 32, 64, 128),
    "dropout": (0.1, 0.3, 0.5, 0.7),
    "lr": (1e-5, 1e-4, 1e-3),
}


def run_sensitivity(plan: ExperimentPlan, axis: str, values: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """Vary one head hyperparameter for the chorus method; per-tier accuracy per value."""
    if axis not in SENSITIVITY_AXES:
        raise ConfigurationError(f"unknown sensitivity axis '{axis}'", key="axis")
    frames = []
    for value in values or SENSITIVITY_AXES[axis]:
        if axis == "dropout":
            customize = plan.customize.model_copy(update={"dropout": float(value)})
        else:
            cast = int(value) if axis == "batch_size" else float(value)
            optimizer = plan.customize.optimizer.model_copy(update={axis: cast})
            customize = plan.customize.model_copy(update={"optimizer": optimizer})
        table = run_plan(dataclasses.replace(plan, customize=customize, methods=["chorus"]))
        if not table.rows.empty:
            frames.append(table.rows.assign(axis=axis, value=value))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
