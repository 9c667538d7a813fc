"""
Streaming Inference with a Context Cache
========================================
Processes a trace of timestamped events in order. Context representations
are cached per context id (LRU) so the context encoder only runs on misses.
"""

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from general.encoders import ChorusEncoders, encode_context, encode_sensor, featurize_text
from general.errors import ConfigurationError, ContractViolation
from general.gating import ChorusHead, fuse_and_classify
from general.models import SensorDataset, StreamEvent
from general.numerics import RngState, as_tensor, parameter_count

logger = logging.getLogger(__name__)

WARMUP_EVENTS = 10


@dataclass
class ContextEntry:
    """Output of the full context-processing stack for one description."""
    context_id: str
    z_context: torch.Tensor
    h_context: Optional[torch.Tensor] = None


class ContextCache:
    """Keyed LRU map context_id -> ContextEntry with hit/miss/eviction counters."""

    def __init__(self, capacity: int = 16):
        if capacity <= 0:
            raise ConfigurationError(f"cache capacity must be positive, got {capacity}", key="stream.capacity")
        self.capacity = capacity
        self._entries: "OrderedDict[str, ContextEntry]" = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    def keys(self) -> List[str]:
        """Keys from least to most recently used."""
        return list(self._entries)

    def get(self, key: str) -> Optional[ContextEntry]:
        if key in self._entries:
            self._entries.move_to_end(key)
            self.hits += 1
            return self._entries[key]
        self.misses += 1
        return None

    def put(self, key: str, entry: ContextEntry) -> Optional[str]:
        """Insert ``entry``; returns the evicted key, if any."""
        evicted = None
        if key not in self._entries and len(self._entries) >= self.capacity:
            evicted, _ = self._entries.popitem(last=False)
            self.evictions += 1
            logger.debug(f"evicted context {evicted}")
        self._entries[key] = entry
        self._entries.move_to_end(key)
        return evicted


class ContextEncoderService:
    """Counts invocations of the context-processing stack (encoder plus the head's context branch)."""

    def __init__(self, encoders: ChorusEncoders, head: Optional[ChorusHead] = None):
        self.encoders = encoders
        self.head = head
        self.invocations = 0

    @torch.no_grad()
    def __call__(self, context_id: str, description: str) -> ContextEntry:
        self.invocations += 1
        features = featurize_text(description, self.encoders.dims.text_dim)
        mu, _, _ = encode_context(features, self.encoders)
        h_context = self.head.context_branch(mu) if self.head is not None else None
        return ContextEntry(context_id, mu, h_context)


def cache_get_or_encode(cache: Optional[ContextCache], context_id: str, description: Optional[str],
                        encoder: Callable[[str, str], ContextEntry]) -> Tuple[ContextEntry, bool]:
    """Cached entry for ``context_id`` or a fresh encode; ``cache=None`` always encodes."""
    entry = cache.get(context_id) if cache is not None else None
    if entry is not None:
        return entry, True
    if description is None:
        raise ContractViolation(f"no description for uncached context '{context_id}'")
    entry = encoder(context_id, description)
    if cache is not None:
        cache.put(context_id, entry)
    return entry, False


@dataclass
class StreamReport:
    samples: pd.DataFrame
    summary: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return dict(self.summary)


def _validate_trace(events: Sequence[StreamEvent]) -> None:
    if not events:
        raise ContractViolation("stream trace is empty")
    indices = [e.index for e in events]
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise ContractViolation("trace indices must be strictly increasing")


@torch.no_grad()
def _single_pass(events: Sequence[StreamEvent], encoders: ChorusEncoders, head: ChorusHead,
                 cache: Optional[ContextCache]) -> Tuple[List[dict], ContextEncoderService]:
    service = ContextEncoderService(encoders, head)
    descriptions: Dict[str, str] = {}
    rows = []
    for event in events:
        description = event.description or descriptions.get(event.context_id)
        if event.description:
            descriptions[event.context_id] = event.description
        start = time.perf_counter_ns()
        entry, hit = cache_get_or_encode(cache, event.context_id, description, service)
        segment = as_tensor(event.segment)
        z_x = encode_sensor(segment, encoders)
        decision = fuse_and_classify(z_x, entry.z_context, segment, head, h_context=entry.h_context)
        latency = time.perf_counter_ns() - start
        y_hat = int(decision.y_hat[0])
        rows.append({
            "index": event.index, "context_id": event.context_id, "hit": hit,
            "predicted": y_hat,
            "correct": (y_hat == event.true_label) if event.true_label is not None else None,
            "alpha_context": float(decision.alpha[0, 1]), "latency_ns": latency,
        })
    return rows, service


def _latency_stats(latencies: np.ndarray) -> Tuple[float, float]:
    return float(latencies.mean()), float(np.percentile(latencies, 95))


def run_stream(events: Sequence[StreamEvent], encoders: ChorusEncoders, head: ChorusHead,
               capacity: int = 16, no_cache: bool = False, compare_uncached: bool = True,
               checkpoint_bytes: Optional[int] = None) -> StreamReport:
    """Single in-order pass with the cache (and optionally one without it) over ``events``."""
    _validate_trace(events)
    cache = None if no_cache else ContextCache(capacity)
    _single_pass(events[:WARMUP_EVENTS], encoders, head, ContextCache(capacity))

    rows, service = _single_pass(events, encoders, head, cache)
    samples = pd.DataFrame(rows)
    mean_ns, p95_ns = _latency_stats(samples["latency_ns"].to_numpy(dtype=np.float64))
    labelled = samples["correct"].dropna()
    misses = cache.misses if cache is not None else len(events)
    summary: Dict[str, object] = {
        "events": len(events),
        "accuracy": float(labelled.astype(bool).mean()) if len(labelled) else None,
        "cache_enabled": cache is not None,
        "capacity": capacity,
        "hits": cache.hits if cache is not None else 0,
        "misses": misses,
        "evictions": cache.evictions if cache is not None else 0,
        "hit_rate": (cache.hits / cache.lookups) if cache is not None else 0.0,
        "encoder_invocations": service.invocations,
        "mean_latency_ns": mean_ns,
        "p95_latency_ns": p95_ns,
        "overhead": {
            "sensor_encoder_params": parameter_count(encoders.sensor),
            "context_encoder_params": parameter_count(encoders.context),
            "head_params": parameter_count(head),
            "checkpoint_bytes": checkpoint_bytes,
        },
    }
    if service.invocations != misses:
        raise ContractViolation(f"{service.invocations} encoder calls but {misses} misses")

    if compare_uncached and cache is not None:
        plain_rows, plain_service = _single_pass(events, encoders, head, None)
        plain = pd.DataFrame(plain_rows)
        u_mean, u_p95 = _latency_stats(plain["latency_ns"].to_numpy(dtype=np.float64))
        summary.update({
            "uncached_encoder_invocations": plain_service.invocations,
            "uncached_mean_latency_ns": u_mean,
            "uncached_p95_latency_ns": u_p95,
            "transparent": bool((plain["predicted"].to_numpy() == samples["predicted"].to_numpy()).all()),
        })
        samples["uncached_latency_ns"] = plain["latency_ns"]

    logger.info(f"Stream: {len(events)} events, {summary['encoder_invocations']} context encodes, "
                f"hit rate {summary['hit_rate']:.4f}, mean latency {mean_ns / 1e3:.1f} us")
    return StreamReport(samples, summary)


def make_trace(dataset: SensorDataset, contexts: Sequence[str], switch_points: Sequence[int],
               length: int, rng: RngState) -> List[StreamEvent]:
    """Consecutive segments per context, switching at ``switch_points``."""
    switch_points = list(switch_points)
    if any(b <= a for a, b in zip(switch_points, switch_points[1:])):
        raise ConfigurationError("switch points must be strictly increasing", key="stream.switch_points")
    if switch_points and (switch_points[0] <= 0 or switch_points[-1] >= length):
        raise ConfigurationError(f"switch points must lie inside (0, {length})", key="stream.switch_points")
    if len(contexts) != len(switch_points) + 1:
        raise ConfigurationError(f"{len(switch_points)} switches need {len(switch_points) + 1} contexts",
                                 key="stream.contexts")
    unknown = [c for c in contexts if c not in dataset.descriptions]
    if unknown:
        raise ConfigurationError(f"unknown contexts {unknown}", key="stream.contexts")

    bounds = [0, *switch_points, length]
    events = []
    for j, name in enumerate(contexts):
        pool = dataset.indices_for([name])
        if len(pool) == 0:
            raise ConfigurationError(f"context '{name}' has no samples", key="stream.contexts")
        picks = rng.child(j).next_generator().integers(0, len(pool), bounds[j + 1] - bounds[j])
        for offset, p in enumerate(picks):
            i = int(pool[p])
            events.append(StreamEvent(index=bounds[j] + offset, segment=dataset.segments[i],
                                      context_id=name, description=dataset.descriptions[name],
                                      true_label=int(dataset.labels[i])))
    return events
