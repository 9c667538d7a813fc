"""
Persistence Formats
===================
Atomic file writes, canonical JSON, JSON-lines datasets and traces, and the
binary checkpoint format:

    b"CHOR" | version <u32 LE> | header length <u64 LE> | JSON header | float32 LE blob

The JSON header carries architecture dims, regime, seed, head metadata and a
tensor manifest (name, shape, byte offset, byte length) into the blob.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from general.encoders import ChorusEncoders
from general.errors import CheckpointError, StorageError
from general.gating import ChorusHead, GateStats
from general.models import ModelDims, SensorDataset, StreamEvent, SyntheticSpec

logger = logging.getLogger(__name__)

MAGIC = b"CHOR"
FORMAT_VERSION = 1
TIMING_SUFFIXES = ("_ns", "_seconds")


# --- atomic writes and canonical JSON --------------------------------------------

def write_atomic(path, data: bytes, force: bool = False) -> Path:
    """Write via a sibling temp file and ``os.replace``; refuse to overwrite unless forced."""
    path = Path(path)
    if path.exists() and not force:
        raise StorageError(f"{path} exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return path


def _jsonable(value):
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def canonicalize(obj):
    """Copy of ``obj`` with every timing field (``*_ns``, ``*_seconds``) zeroed."""
    if isinstance(obj, dict):
        return {k: (0 if isinstance(k, str) and k.endswith(TIMING_SUFFIXES) else canonicalize(v))
                for k, v in obj.items()}
    if isinstance(obj, list):
        return [canonicalize(v) for v in obj]
    return obj


def write_json(path, obj, force: bool = False, canonical: bool = False) -> Path:
    payload = canonicalize(obj) if canonical else obj
    return write_atomic(path, (canonical_json(payload) + "\n").encode(), force)


def read_json(path) -> Any:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"file not found: {path}")
    with open(path, "r") as f:
        return json.load(f)


def write_csv(path, frame: pd.DataFrame, force: bool = False, canonical: bool = False) -> Path:
    if canonical:
        frame = frame.copy()
        for col in frame.columns:
            if str(col).endswith(TIMING_SUFFIXES):
                frame[col] = 0
    return write_atomic(path, frame.to_csv(index=False).encode(), force)


def _read_jsonl(path) -> List[dict]:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"file not found: {path}")
    with open(path, "r") as f:
        return [json.loads(line) for line in f if line.strip()]


# --- datasets and traces ---------------------------------------------------------

def dataset_lines(dataset: SensorDataset) -> Iterable[str]:
    header = {
        "type": "header",
        "count": len(dataset),
        "descriptions": dataset.descriptions,
        "spec": dataset.spec.model_dump(mode="json") if dataset.spec is not None else None,
    }
    yield canonical_json(header)
    for i in range(len(dataset)):
        yield canonical_json({
            "type": "record", "index": i, "context_id": dataset.context_ids[i],
            "label": int(dataset.labels[i]), "segment": dataset.segments[i].tolist(),
        })


def write_dataset(path, dataset: SensorDataset, force: bool = False) -> Path:
    return write_atomic(path, ("\n".join(dataset_lines(dataset)) + "\n").encode(), force)


def read_dataset(path) -> SensorDataset:
    lines = _read_jsonl(path)
    if not lines or lines[0].get("type") != "header":
        raise StorageError(f"{path} has no dataset header record")
    header, records = lines[0], lines[1:]
    if header["count"] != len(records):
        raise StorageError(f"{path}: header announces {header['count']} records, found {len(records)}")
    spec = SyntheticSpec.model_validate(header["spec"]) if header.get("spec") else None
    return SensorDataset(
        segments=np.asarray([r["segment"] for r in records], dtype=np.float32),
        labels=np.asarray([r["label"] for r in records], dtype=np.int64),
        context_ids=[r["context_id"] for r in records],
        descriptions=dict(header["descriptions"]),
        spec=spec,
    )


def write_trace(path, events: List[StreamEvent], force: bool = False) -> Path:
    lines = [canonical_json({
        "index": e.index, "context_id": e.context_id, "description": e.description,
        "true_label": e.true_label, "segment": np.asarray(e.segment, dtype=np.float32).tolist(),
    }) for e in events]
    return write_atomic(path, ("\n".join(lines) + "\n").encode(), force)


def read_trace(path) -> List[StreamEvent]:
    return [StreamEvent(index=r["index"], segment=np.asarray(r["segment"], dtype=np.float32),
                        context_id=r["context_id"], description=r.get("description"),
                        true_label=r.get("true_label")) for r in _read_jsonl(path)]


# --- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    header: Dict[str, Any]
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        manifest, chunks, offset = [], [], 0
        for name in sorted(self.tensors):
            data = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            raw = data.tobytes()
            manifest.append({"name": name, "shape": list(data.shape), "offset": offset, "length": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        header = canonical_json({**self.header, "manifest": manifest}).encode()
        return MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(header)) + header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic bytes)")
        if len(data) < 16:
            raise CheckpointError("truncated checkpoint preamble")
        (version,) = struct.unpack("<I", data[4:8])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
        (header_len,) = struct.unpack("<Q", data[8:16])
        try:
            header = json.loads(data[16:16 + header_len].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unreadable checkpoint header: {e}") from e
        blob = data[16 + header_len:]
        manifest = header.pop("manifest", [])

        tensors, cursor = {}, 0
        for entry in sorted(manifest, key=lambda e: e["offset"]):
            start, length = entry["offset"], entry["length"]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            if start < cursor or start + length > len(blob) or length != 4 * count:
                raise CheckpointError(f"inconsistent manifest entry for {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(blob[start:start + length], dtype="<f4").reshape(entry["shape"])
            cursor = start + length
        if cursor != len(blob):
            raise CheckpointError("checkpoint blob has trailing bytes")
        return cls(header, tensors)


def save_checkpoint(path, checkpoint: Checkpoint, force: bool = False) -> Path:
    return write_atomic(path, checkpoint.to_bytes(), force)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes())


def _module_tensors(prefix: str, module: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{name}": p.detach().to(torch.float32).numpy().copy()
            for name, p in module.state_dict().items()}


def _load_module(prefix: str, module: torch.nn.Module, tensors: Dict[str, np.ndarray]) -> None:
    state = {}
    for name in module.state_dict():
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key}")
        state[name] = torch.from_numpy(np.array(tensors[key], dtype=np.float32))
    module.load_state_dict(state)


def bundle_checkpoint(encoders: ChorusEncoders, heads: Optional[Dict[str, ChorusHead]] = None,
                      **meta) -> Checkpoint:
    """Checkpoint of frozen encoders plus any trained heads."""
    header = {"dims": encoders.dims.model_dump(mode="json"), "heads": {}, **meta}
    tensors = _module_tensors("encoders", encoders)
    for method, head in (heads or {}).items():
        header["heads"][method] = {
            "method": head.method, "dropout": head.dropout_rate,
            "gate_stats": head.gate_stats.to_dict() if head.gate_stats is not None else None,
        }
        tensors.update(_module_tensors(f"head.{method}", head))
    return Checkpoint(header, tensors)


def unbundle_checkpoint(checkpoint: Checkpoint) -> Tuple[ChorusEncoders, Dict[str, ChorusHead]]:
    dims = ModelDims.model_validate(checkpoint.header["dims"])
    encoders = ChorusEncoders(dims)
    _load_module("encoders", encoders, checkpoint.tensors)
    heads = {}
    for method, info in checkpoint.header.get("heads", {}).items():
        head = ChorusHead(dims, info["method"], info["dropout"])
        _load_module(f"head.{method}", head, checkpoint.tensors)
        if info.get("gate_stats"):
            head.gate_stats = GateStats.from_dict(info["gate_stats"])
        heads[method] = head
    return encoders, heads
