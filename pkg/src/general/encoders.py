"""
Sensor and Context Encoders
===========================
Deterministic text featurizer, the sensor encoder, the Gaussian context
encoder and the two cross-modal decoders.
"""

import logging
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from general.errors import ContractViolation
from general.models import ContextRecord, LatentPair, ModelDims, SensorSegment
from general.numerics import RngState, as_tensor, check_finite, init_parameters

logger = logging.getLogger(__name__)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK_64 = (1 << 64) - 1
LOGVAR_CLAMP = 10.0


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK_64
    return h


def char_trigrams(description: str):
    text = " ".join(description.lower().split())
    if not text:
        return []
    padded = f" {text} "
    return [padded[i:i + 3] for i in range(len(padded) - 2)]


def featurize_text(description: str, dim: int = 64) -> np.ndarray:
    """Signed hashed character trigrams, L2-normalized (all-zero for empty text)."""
    vec = np.zeros(dim, dtype=np.float64)
    for gram in char_trigrams(description):
        h = fnv1a_64(gram.encode("utf-8"))
        vec[h % dim] += -1.0 if h >> 63 else 1.0
    norm = np.linalg.norm(vec)
    if norm == 0:
        return np.zeros(dim, dtype=np.float32)
    return (vec / norm).astype(np.float32)


def make_context_record(context_id: str, description: str, dim: int = 64) -> ContextRecord:
    return ContextRecord(context_id, description, featurize_text(description, dim))


class SensorEncoder(nn.Module):
    """Two strided conv blocks, global average pooling, linear projection."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        c1, c2 = dims.conv_channels
        pad = dims.kernel // 2
        self.dims = dims
        self.conv1 = nn.Conv1d(dims.channels, c1, dims.kernel, stride=dims.stride, padding=pad)
        self.conv2 = nn.Conv1d(c1, c2, dims.kernel, stride=dims.stride, padding=pad)
        self.proj = nn.Linear(c2, dims.latent)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or tuple(x.shape[1:]) != (self.dims.channels, self.dims.length):
            raise ContractViolation(
                f"expected segments of shape (B, {self.dims.channels}, {self.dims.length}), got {tuple(x.shape)}")
        out = F.relu(self.conv1(x))
        out = F.relu(self.conv2(out))
        return self.proj(out.mean(dim=2))


class ContextEncoder(nn.Module):
    """MLP over text features with mean and log-variance heads."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.hidden = nn.Linear(dims.text_dim, dims.context_hidden)
        self.mu_head = nn.Linear(dims.context_hidden, dims.latent)
        self.logvar_head = nn.Linear(dims.context_hidden, dims.latent)

    def forward(self, features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = F.relu(self.hidden(features))
        logvar = torch.clamp(self.logvar_head(h), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return self.mu_head(h), logvar


class SensorDecoder(nn.Module):
    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        self.hidden = nn.Linear(dims.latent, dims.decoder_hidden)
        self.out = nn.Linear(dims.decoder_hidden, dims.channels * dims.length)

    def forward(self, z_c: torch.Tensor) -> torch.Tensor:
        flat = self.out(F.relu(self.hidden(z_c)))
        return flat.reshape(*z_c.shape[:-1], self.dims.channels, self.dims.length)


class ChorusEncoders(nn.Module):
    """Everything trained in stage 1."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        self.sensor = SensorEncoder(dims)
        self.context = ContextEncoder(dims)
        self.sensor_decoder = SensorDecoder(dims)
        self.context_decoder = nn.Linear(dims.latent, dims.text_dim)

    @classmethod
    def initialized(cls, dims: ModelDims, rng: RngState) -> "ChorusEncoders":
        return init_parameters(cls(dims), rng)


SegmentLike = Union[SensorSegment, np.ndarray, torch.Tensor]


def _segment_batch(x: SegmentLike) -> Tuple[torch.Tensor, bool]:
    if isinstance(x, SensorSegment):
        x = x.values
    t = x if isinstance(x, torch.Tensor) else as_tensor(x)
    if t.dim() == 2:
        return t.unsqueeze(0), True
    return t, False


def encode_sensor(x: SegmentLike, model: ChorusEncoders) -> torch.Tensor:
    batch, single = _segment_batch(x)
    z_x = check_finite(model.sensor(batch.to(model.sensor.proj.weight.dtype)), "encode_sensor")
    return z_x[0] if single else z_x


def encode_context(c: Union[ContextRecord, np.ndarray, torch.Tensor], model: ChorusEncoders,
                   rng: Optional[RngState] = None, training: bool = False,
                   noise: Optional[torch.Tensor] = None):
    """Posterior (mu, logvar) and z; z == mu unless training.

    During training z = mu + exp(logvar / 2) * eps with eps drawn from ``rng``
    (or taken from ``noise`` when supplied). Inference consumes no randomness.
    """
    features = c.features if isinstance(c, ContextRecord) else c
    f = features if isinstance(features, torch.Tensor) else as_tensor(features)
    if f.shape[-1] != model.dims.text_dim:
        raise ContractViolation(f"context features must have length {model.dims.text_dim}, got {f.shape[-1]}")
    mu, logvar = model.context(f.to(model.context.hidden.weight.dtype))
    check_finite(mu, "encode_context.mu")
    if not training:
        return mu, logvar, mu
    if noise is None:
        if rng is None:
            raise ContractViolation("training-mode context encoding needs an RngState")
        noise = as_tensor(rng.normal(tuple(mu.shape)))
    z = mu + torch.exp(0.5 * logvar) * noise.to(mu.dtype)
    return mu, logvar, check_finite(z, "encode_context.z")


def decode_sensor(z_c: torch.Tensor, model: ChorusEncoders) -> torch.Tensor:
    if z_c.shape[-1] != model.dims.latent:
        raise ContractViolation(f"z_c must have length {model.dims.latent}")
    return model.sensor_decoder(z_c)


def decode_context(z_x: torch.Tensor, model: ChorusEncoders) -> torch.Tensor:
    if z_x.shape[-1] != model.dims.latent:
        raise ContractViolation(f"z_x must have length {model.dims.latent}")
    return model.context_decoder(z_x)


def context_table(descriptions: Dict[str, str], dim: int) -> Dict[str, np.ndarray]:
    """Text features for every context id."""
    return {cid: featurize_text(text, dim) for cid, text in sorted(descriptions.items())}


def context_features_for(context_ids: Iterable[str], table: Dict[str, np.ndarray]) -> torch.Tensor:
    return as_tensor(np.stack([table[c] for c in context_ids]))


def encode_batch(model: ChorusEncoders, segments: torch.Tensor, context_features: torch.Tensor,
                 rng: Optional[RngState] = None, training: bool = False,
                 noise: Optional[torch.Tensor] = None) -> LatentPair:
    z_x = encode_sensor(segments, model)
    mu, logvar, z_c = encode_context(context_features, model, rng=rng, training=training, noise=noise)
    return LatentPair(z_x=z_x, mu_c=mu, logvar_c=logvar, z_c=z_c)


@torch.no_grad()
def frozen_embeddings(model: ChorusEncoders, segments: np.ndarray, context_ids, table,
                      batch_size: int = 512) -> Tuple[torch.Tensor, torch.Tensor]:
    """Inference-mode (z_x, mu_c) for a whole array of segments."""
    zs, mus = [], []
    for start in range(0, len(segments), batch_size):
        seg = as_tensor(segments[start:start + batch_size])
        feats = context_features_for(context_ids[start:start + batch_size], table)
        pair = encode_batch(model, seg, feats)
        zs.append(pair.z_x)
        mus.append(pair.mu_c)
    return torch.cat(zs), torch.cat(mus)
