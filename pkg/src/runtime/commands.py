"""
Command Layer
=============
One function per CLI verb. Each returns a result dict: ``{"success": True, ...}``
or the machine-readable error record produced by ``error_record``.
"""

import functools
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import numpy as np
import pandas as pd
import torch

from general.errors import ConfigurationError, StorageError, error_record
from general.experiments import (ExperimentPlan, budget_subset, pretrain_pool_split, probe_context_embeddings,
                                 run_budget_sweep, run_plan, run_sensitivity)
from general.gating import ChorusHead, head_inputs, predict, run_customize
from general.models import RunConfig, SensorDataset, ShiftReport
from general.numerics import STREAM_INIT, STREAM_SPLIT, STREAM_TRACE, RngState
from general.pretraining import make_regime, run_pretrain
from general.process import classification_metrics
from general.shiftlab import build_tiers, estimate_cm, generate_dataset, train_sensor_baseline
from general.visualize import plot_centroid_distances, plot_gate_diagnostics, plot_stream_timeline
from runtime.storage import (bundle_checkpoint, canonicalize, load_checkpoint, read_dataset, read_json, read_trace,
                             save_checkpoint, unbundle_checkpoint, write_csv, write_dataset, write_json,
                             write_trace)
from runtime.streaming import make_trace, run_stream

logger = logging.getLogger(__name__)


def command(fn: Callable[..., Dict[str, Any]]) -> Callable[..., Dict[str, Any]]:
    """Convert raised errors into error records."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs) -> Dict[str, Any]:
        try:
            return fn(*args, **kwargs)
        except Exception as e:
            logger.error(f"❌ {fn.__name__} failed: {e}")
            return error_record(e)
    return wrapper


def _out(config: RunConfig) -> Path:
    out = Path(config.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(config: RunConfig) -> SensorDataset:
    path = _out(config) / config.paths.dataset
    if not path.exists():
        raise StorageError(f"dataset not found: {path} (run 'generate' first)")
    return read_dataset(path)


def _plan(config: RunConfig) -> ExperimentPlan:
    return ExperimentPlan.from_config(config)


def _source_split(config: RunConfig, dataset: SensorDataset):
    source = dataset.select_contexts(config.shift.source_contexts)
    unlabeled, pool = pretrain_pool_split(source, _plan(config), config.seed)
    return source, unlabeled, pool


def _shift_report(config: RunConfig, dataset: SensorDataset, with_cm: bool) -> ShiftReport:
    shift = config.shift
    report = build_tiers(dataset, shift.source_contexts, shift.target_contexts, shift.features, shift.kind,
                         shift.max_points, RngState(config.seed, STREAM_SPLIT, path=(2,)))
    if with_cm:
        _, _, pool = _source_split(config, dataset)
        baseline, _ = train_sensor_baseline(pool, config.model, RngState(config.seed, STREAM_SPLIT, path=(3,)))
        estimate_cm(baseline, dataset, report, shift.weak_threshold, shift.strong_threshold)
    return report


def _load_shift(config: RunConfig, dataset: SensorDataset) -> ShiftReport:
    path = _out(config) / "shift.json"
    if path.exists():
        return ShiftReport(**read_json(path))
    return _shift_report(config, dataset, with_cm=False)


@command
def cmd_generate(config: RunConfig, force: bool = False) -> Dict[str, Any]:
    dataset = generate_dataset(config.data)
    path = write_dataset(_out(config) / config.paths.dataset, dataset, force)
    logger.info(f"✅ Wrote {len(dataset)} records to {path}")
    return {"success": True, "path": str(path), "records": len(dataset)}


@command
def cmd_shift(config: RunConfig, force: bool = False, with_cm: bool = True) -> Dict[str, Any]:
    dataset = _dataset(config)
    report = _shift_report(config, dataset, with_cm)
    out = _out(config)
    write_json(out / "shift.json", report.to_dict(), force)
    write_csv(out / "shift.csv", pd.DataFrame(report.rows()), force)
    return {"success": True, **report.to_dict()}


@command
def cmd_pretrain(config: RunConfig, force: bool = False) -> Dict[str, Any]:
    dataset = _dataset(config)
    name = config.pretrain.regime
    if name == "auto":
        report = _load_shift(config, dataset)
        if report.regime is None:
            report = _shift_report(config, dataset, with_cm=True)
        name = report.regime
        logger.info(f"Auto regime from C_m: {name}")
    regime = make_regime(name, config.pretrain.lam, config.pretrain.gamma,
                         config.pretrain.lambda_xc, config.pretrain.lambda_cx)

    _, unlabeled, _ = _source_split(config, dataset)
    encoders, report = run_pretrain(unlabeled, regime, config.pretrain.optimizer, RngState(config.seed, path=(10,)),
                                    config.model, config.pretrain.tau, config.pretrain.val_fraction)
    out = _out(config)
    checkpoint = bundle_checkpoint(encoders, regime=regime.model_dump(), seed=config.seed)
    path = save_checkpoint(out / config.paths.checkpoint, checkpoint, force)
    write_json(out / "pretrain_report.json", report.to_dict(), force)
    return {"success": True, "checkpoint": str(path), "regime": regime.name,
            "epochs": len(report.history) - 1, "best_epoch": report.best_epoch}


@command
def cmd_customize(config: RunConfig, force: bool = False) -> Dict[str, Any]:
    out = _out(config)
    checkpoint = load_checkpoint(out / config.paths.checkpoint)
    encoders, _ = unbundle_checkpoint(checkpoint)
    dataset = _dataset(config)
    source, _, pool = _source_split(config, dataset)
    picked = budget_subset(pool.labels, config.customize.budget, RngState(config.seed, STREAM_SPLIT, path=(1,)),
                           total=len(source))
    labeled = pool.subset(picked)
    method = config.customize.method
    head, report = run_customize(encoders, labeled, config.customize,
                                 RngState(config.seed, path=(20, 0)), method)

    meta = {k: v for k, v in checkpoint.header.items() if k not in ("dims", "heads")}
    bundled = bundle_checkpoint(encoders, {method: head}, **meta)
    path = save_checkpoint(out / config.paths.head_checkpoint, bundled, force)
    write_json(out / "customize_report.json", report.to_dict(), force)
    return {"success": True, "checkpoint": str(path), "method": method, "labeled": len(labeled),
            "classes": sorted(int(c) for c in np.unique(labeled.labels)),
            "encoder_digest": report.extra["encoder_digest"]}


def _head_for(config: RunConfig, untrained: bool):
    out = _out(config)
    if untrained:
        encoders, _ = unbundle_checkpoint(load_checkpoint(out / config.paths.checkpoint))
        head = ChorusHead.initialized(config.model, config.customize.method, config.customize.dropout,
                                      RngState(config.seed, STREAM_INIT, path=(30,)))
        return encoders, head
    encoders, heads = unbundle_checkpoint(load_checkpoint(out / config.paths.head_checkpoint))
    method = config.customize.method
    if method not in heads:
        raise ConfigurationError(f"checkpoint has no head for '{method}'", key="customize.method")
    return encoders, heads[method]


@command
def cmd_evaluate(config: RunConfig, force: bool = False, untrained: bool = False) -> Dict[str, Any]:
    dataset = _dataset(config)
    report = _load_shift(config, dataset)
    encoders, head = _head_for(config, untrained)
    targets = dataset.select_contexts(config.shift.target_contexts)
    decision = predict(head, head_inputs(encoders, targets))
    y_hat = decision.y_hat.numpy()
    tiers = np.array([report.tiers[c] for c in targets.context_ids])
    rows = []
    for tier in ("Low", "Mid", "High"):
        mask = tiers == tier
        if mask.any():
            rows.append({"method": head.method, "tier": tier,
                         **classification_metrics(targets.labels[mask], y_hat[mask], config.model.num_classes),
                         "alpha_context": float(decision.alpha[torch.from_numpy(mask), 1].mean())})
    overall = classification_metrics(targets.labels, y_hat, config.model.num_classes)
    out = _out(config)
    write_csv(out / "evaluation.csv", pd.DataFrame(rows), force)
    write_json(out / "evaluation.json", {"overall": overall, "tiers": rows, "untrained": untrained}, force)
    return {"success": True, "overall": overall, "tiers": rows}


@command
def cmd_stream(config: RunConfig, force: bool = False, canonical: bool = False,
               trace: Optional[str] = None) -> Dict[str, Any]:
    """Stream a trace through the cached head; ``trace`` replays an existing trace file."""
    out = _out(config)
    encoders, head = _head_for(config, untrained=False)
    stream = config.stream
    if trace is not None:
        events = read_trace(trace)
        logger.info(f"Replaying {len(events)} events from {trace}")
    else:
        events = make_trace(_dataset(config), stream.contexts, stream.switch_points, stream.trace_length,
                            RngState(config.seed, STREAM_TRACE))
        write_trace(out / config.paths.trace, events, force)
    size = (out / config.paths.head_checkpoint).stat().st_size
    report = run_stream(events, encoders, head, stream.capacity, stream.no_cache, stream.compare_uncached, size)
    write_json(out / "stream.json", report.to_dict(), force, canonical)
    columns = ["index", "context_id", "hit", "correct", "alpha_context", "latency_ns"]
    write_csv(out / "stream_samples.csv", report.samples[columns], force, canonical)
    plot_stream_timeline(report.samples, out / "stream_timeline.png")
    summary = canonicalize(report.to_dict()) if canonical else report.to_dict()
    return {"success": True, **summary}


@command
def cmd_experiment(config: RunConfig, force: bool = False, sweep: Optional[str] = None) -> Dict[str, Any]:
    plan = _plan(config)
    out = _out(config)
    if sweep == "budget":
        frame = run_budget_sweep(plan, config.experiment.budgets)
        write_csv(out / "budget_sweep.csv", frame, force)
        return {"success": True, "rows": len(frame)}
    if sweep is not None:
        frame = run_sensitivity(plan, sweep)
        write_csv(out / f"sensitivity_{sweep}.csv", frame, force)
        return {"success": True, "rows": len(frame)}

    table = run_plan(plan)
    write_csv(out / "results.csv", table.rows, force)
    summary = table.summary()
    write_csv(out / "summary.csv", summary, force)
    diagnostics = []
    if {"chorus", "sensor_only"} <= set(plan.methods) and not table.samples.empty:
        diagnostics = table.diagnostics()
        write_csv(out / "diagnostics.csv", pd.DataFrame(diagnostics), force)
        plot_gate_diagnostics(diagnostics, out / "gate_diagnostics.png")
    write_json(out / "results.json", {
        "rows": table.rows.to_dict(orient="records"),
        "summary": summary.to_dict(orient="records"),
        "diagnostics": diagnostics,
        "failures": table.failures,
        "shift": {str(k): v for k, v in table.shift.items()},
    }, force)
    return {"success": not table.failures or len(table.failures) < len(plan.seeds),
            "rows": len(table.rows), "failures": table.failures}


@command
def cmd_probe(config: RunConfig, force: bool = False) -> Dict[str, Any]:
    dataset = _dataset(config)
    out = _out(config)
    encoders, _ = unbundle_checkpoint(load_checkpoint(out / config.paths.checkpoint))
    result = probe_context_embeddings(encoders, dataset, config.seed)
    write_json(out / "probe.json", result.to_dict(), force)
    plot_centroid_distances(result.centroid_distances, out / "centroid_distances.png")
    return {"success": True, **result.to_dict()}
