"""
Numerics Layer
==============
Seeded counter-based randomness, parameter initialization, AdamW stepping,
guarded forward/backward and a finite-difference gradient checker.

Everything else in the package builds on torch tensors through this module:
float32 storage, float64 accumulation for reductions, and random draws that
come only from ``RngState`` streams (never from torch's global generator).
"""

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np
import torch
from torch import nn

from general.errors import ConfigurationError, ContractViolation, NumericFailure

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

# Independent streams so subsystems never perturb each other's draws.
STREAM_INIT = 0
STREAM_SAMPLING = 1
STREAM_DATA = 2
STREAM_DROPOUT = 3
STREAM_SPLIT = 4
STREAM_TRACE = 5
STREAM_PROBE = 6


@dataclass
class RngState:
    """Counter-based random state: (seed, stream, path, draw_index) -> draws.

    Each draw builds a fresh Philox generator keyed by the full tuple, so the
    same (seed, stream, draw index) yields the same numbers on every platform.
    """
    seed: int
    stream: int = STREAM_INIT
    draw_index: int = 0
    path: Tuple[int, ...] = field(default_factory=tuple)

    def _key(self, index: int) -> np.random.SeedSequence:
        return np.random.SeedSequence([int(self.seed), int(self.stream), *self.path, int(index)])

    def generator_at(self, index: int) -> np.random.Generator:
        """Generator for a given draw index, without advancing the counter."""
        return np.random.Generator(np.random.Philox(self._key(index)))

    def next_generator(self) -> np.random.Generator:
        gen = self.generator_at(self.draw_index)
        self.draw_index += 1
        return gen

    def normal(self, shape) -> np.ndarray:
        return self.next_generator().standard_normal(shape, dtype=np.float32)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.next_generator().uniform(low, high, shape).astype(np.float32)

    def random(self, shape) -> np.ndarray:
        return self.next_generator().random(shape, dtype=np.float32)

    def permutation(self, n: int) -> np.ndarray:
        return self.next_generator().permutation(n)

    def child(self, index: int) -> "RngState":
        """Derived state for a sub-task (e.g. one sample of a dataset)."""
        return RngState(self.seed, self.stream, 0, self.path + (int(index),))

    def fork(self, stream: int) -> "RngState":
        return RngState(self.seed, stream, 0, self.path)

    def copy(self) -> "RngState":
        return copy.deepcopy(self)


def as_tensor(array) -> Tensor:
    """float32 tensor from any array-like."""
    return torch.as_tensor(np.asarray(array, dtype=np.float32))


def check_finite(tensor: Tensor, node: str) -> Tensor:
    if not torch.isfinite(tensor).all():
        raise NumericFailure(node)
    return tensor


def init_parameters(module: nn.Module, rng: RngState) -> nn.Module:
    """uniform(-a, a) weights with a = sqrt(1/fan_in); zero biases."""
    with torch.no_grad():
        for name, layer in module.named_modules():
            if isinstance(layer, (nn.Linear, nn.Conv1d)):
                fan_in = layer.weight[0].numel()
                bound = math.sqrt(1.0 / fan_in)
                layer.weight.copy_(as_tensor(rng.uniform(-bound, bound, tuple(layer.weight.shape))))
                if layer.bias is not None:
                    layer.bias.zero_()
    return module


def dropout(x: Tensor, p: float, rng: Optional[RngState], training: bool) -> Tensor:
    """Inverted dropout whose mask is drawn from a dedicated RNG stream."""
    if not training or p <= 0.0 or rng is None:
        return x
    keep = as_tensor(rng.random(tuple(x.shape)) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def batch_slices(order: np.ndarray, batch_size: int):
    """Consecutive index batches; a trailing singleton joins the previous batch."""
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def epoch_batches(n: int, batch_size: int, rng: RngState, min_steps: int = 0) -> List[np.ndarray]:
    """Shuffled passes over ``range(n)``, repeated until at least ``min_steps`` batches exist."""
    if n == 0:
        return []
    batches = batch_slices(rng.permutation(n), batch_size)
    while len(batches) < min_steps:
        batches.extend(batch_slices(rng.permutation(n), batch_size))
    return batches


def tensor_digest(tensors: Mapping[str, Tensor]) -> str:
    """SHA-256 over names and float32 bytes, in sorted name order."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        digest.update(name.encode())
        digest.update(tensors[name].detach().to(torch.float32).contiguous().numpy().tobytes())
    return digest.hexdigest()


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --- optimization --------------------------------------------------------------

class ParamStore:
    """Named trainable tensors plus their AdamW state."""

    def __init__(self, params: Mapping[str, Tensor]):
        self.params: Dict[str, Tensor] = dict(params)
        self._optimizer = torch.optim.AdamW(
            list(self.params.values()), lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
            weight_decay=0.0, foreach=False,
        )
        self._index = {name: i for i, name in enumerate(self.params)}

    @classmethod
    def from_modules(cls, *modules: nn.Module) -> "ParamStore":
        params = {}
        for i, module in enumerate(modules):
            for name, p in module.named_parameters():
                if p.requires_grad:
                    params[f"{i}.{name}"] = p
        return cls(params)

    def state(self, name: str) -> dict:
        """First moment, second moment and step count of one parameter."""
        raw = self._optimizer.state.get(self.params[name], {})
        step = raw.get("step", 0)
        return {
            "exp_avg": raw.get("exp_avg"),
            "exp_avg_sq": raw.get("exp_avg_sq"),
            "step": int(step.item()) if isinstance(step, Tensor) else int(step),
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adamw_step(store: ParamStore, grads: Mapping[str, Tensor], lr: float,
               betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> ParamStore:
    """Decoupled weight decay followed by a bias-corrected Adam update."""
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}", key="lr")
    group = store._optimizer.param_groups[0]
    group.update(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
    for name, p in store.params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if tuple(g.shape) != tuple(p.shape):
            raise ContractViolation(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        p.grad = g.detach().to(p.dtype).clone()
    store._optimizer.step()
    store.zero_grad()
    return store


def forward_backward(loss: Tensor, params: Mapping[str, Tensor]) -> Dict[str, Tensor]:
    """d loss / d p for every parameter; zeros for parameters outside the graph."""
    if loss.dim() != 0:
        raise ContractViolation(f"loss must be scalar, got shape {tuple(loss.shape)}")
    check_finite(loss, "loss")
    names = list(params)
    tensors = [params[n] for n in names]
    raw = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = {}
    for name, p, g in zip(names, tensors, raw):
        g = torch.zeros_like(p) if g is None else g
        grads[name] = check_finite(g, f"grad[{name}]")
    return grads


# --- gradient checking ---------------------------------------------------------

class Graph(NamedTuple):
    """A deterministic scalar computation over named float64 leaf tensors."""
    fn: Callable[[], Tensor]
    params: Dict[str, Tensor]


def leaf(value, dtype=torch.float64) -> Tensor:
    return torch.as_tensor(np.asarray(value)).to(dtype).clone().requires_grad_(True)


def module_graph(modules: Iterable[nn.Module], loss_fn: Callable[..., Tensor]) -> Graph:
    """float64 copies of ``modules``; ``loss_fn(*copies)`` becomes the graph."""
    copies = [copy.deepcopy(m).double() for m in modules]
    params = {}
    for i, m in enumerate(copies):
        for name, p in m.named_parameters():
            if p.requires_grad:
                params[f"{i}.{name}"] = p
    return Graph(lambda: loss_fn(*copies), params)


def grad_check(graph: Graph, h: float = 1e-3, floor: float = 1e-8) -> float:
    """Worst relative error between autograd and central differences.

    Each component is compared as |a - n| / max(|a|, |n|, floor), so ``floor``
    acts as an absolute tolerance scale for near-zero gradient entries.
    """
    if not (0.0 < h <= 1e-1):
        raise ContractViolation(f"step h must lie in (0, 0.1], got {h}")
    names = list(graph.params)
    tensors = [graph.params[n] for n in names]
    loss = graph.fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for name, p, g in zip(names, tensors, analytic):
            flat = p.data.view(-1)
            g_flat = torch.zeros_like(flat) if g is None else g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = graph.fn().item()
                flat[i] = orig - h
                f_minus = graph.fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = g_flat[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                if err > worst:
                    worst = err
                    logger.debug(f"grad_check worst so far {err:.3e} at {name}[{i}]")
    return worst
