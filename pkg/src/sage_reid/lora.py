"""Low-rank adapters: the delta/merge algebra and parameter accounting.

An adapter is a pair (A, B) of rank ``r`` attached to one frozen projection
matrix. Its contribution is ``(scale / r) * A @ B``; training starts exactly
at the frozen model because B is zero-initialized. One expert is a full set
of adapters covering every adapted slot of every block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, IncompatibleModelsError, ShapeError
from .model import (
    BackboneConfig,
    BackboneParams,
    LayerKey,
    Projector,
    layer_dims,
    layer_keys,
    weight_name,
)
from .rng import derive_rng


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    scale: float = 16.0
    dropout: float = 0.05


@dataclass
class LoraAdapter:
    a: np.ndarray  # (n, r)
    b: np.ndarray  # (r, m)
    rank: int
    scale: float
    dropout_p: float
    layer_key: LayerKey

    def __post_init__(self):
        n, r_a = self.a.shape
        r_b, m = self.b.shape
        if r_a != self.rank or r_b != self.rank:
            raise ShapeError(f"factor shapes {self.a.shape}/{self.b.shape} do not carry rank {self.rank}")
        if not 1 <= self.rank <= min(n, m):
            raise DomainError(f"rank {self.rank} outside [1, min({n}, {m})]")
        if not 0.0 <= self.dropout_p < 1.0:
            raise DomainError(f"dropout probability {self.dropout_p} outside [0, 1)")

    @property
    def param_count(self) -> int:
        return self.a.size + self.b.size

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            self.a.copy(), self.b.copy(), self.rank, self.scale, self.dropout_p, self.layer_key
        )


@dataclass
class ExpertAdapterSet:
    source_id: int
    adapters: dict[LayerKey, LoraAdapter]

    def copy(self) -> "ExpertAdapterSet":
        return ExpertAdapterSet(self.source_id, {k: a.copy() for k, a in self.adapters.items()})

    @property
    def param_count(self) -> int:
        return sum(a.param_count for a in self.adapters.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for key in sorted(self.adapters):
            out[f"{weight_name(key)}.a"] = self.adapters[key].a
            out[f"{weight_name(key)}.b"] = self.adapters[key].b
        return out


def init_expert_adapters(
    config: BackboneConfig, lora: LoraConfig, source_id: int, seed: int
) -> ExpertAdapterSet:
    """A drawn Kaiming-uniform, B zero, so the adapted model starts at the base."""
    rng = derive_rng(seed, "lora-init", source_id)
    adapters: dict[LayerKey, LoraAdapter] = {}
    for key in layer_keys(config):
        n, m = layer_dims(config, key)
        bound = math.sqrt(6.0 / n)
        adapters[key] = LoraAdapter(
            a=rng.uniform(-bound, bound, size=(n, lora.rank)),
            b=np.zeros((lora.rank, m)),
            rank=lora.rank,
            scale=lora.scale,
            dropout_p=lora.dropout,
            layer_key=key,
        )
    return ExpertAdapterSet(source_id, adapters)


def validate_expert(expert: ExpertAdapterSet, config: BackboneConfig) -> None:
    expected = set(layer_keys(config))
    got = set(expert.adapters)
    if got != expected:
        raise IncompatibleModelsError(
            f"expert covers {sorted(got)} but config defines {sorted(expected)}"
        )


def lora_delta(adapter: LoraAdapter) -> np.ndarray:
    """The dense residual (scale / rank) * A @ B."""
    return (adapter.scale / adapter.rank) * (adapter.a @ adapter.b)


def adapted_weight(w0: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    delta = lora_delta(adapter)
    if w0.shape != delta.shape:
        raise ShapeError(f"base weight {w0.shape} vs adapter delta {delta.shape}")
    return w0 + delta


def expert_deltas(expert: ExpertAdapterSet) -> dict[LayerKey, np.ndarray]:
    return {key: lora_delta(a) for key, a in expert.adapters.items()}


def average_backbones(backbones: Sequence[BackboneParams]) -> BackboneParams:
    """Elementwise mean of every weight across same-config backbones."""
    if len(backbones) < 1:
        raise IncompatibleModelsError("need at least one backbone to average")
    first = backbones[0]
    for other in backbones[1:]:
        if other.config != first.config:
            raise IncompatibleModelsError("backbone configs disagree")
        if other.weights.keys() != first.weights.keys():
            raise IncompatibleModelsError("backbone weight sets disagree")
    averaged = {
        name: np.mean([b.weights[name] for b in backbones], axis=0)
        for name in first.weights
    }
    return BackboneParams(first.config, averaged)


def merge_adapters(deltas: Sequence[np.ndarray], alpha: np.ndarray) -> np.ndarray:
    """Convex combination of expert deltas under simplex coefficients."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.shape[0] != len(deltas):
        raise ShapeError(f"{alpha.shape[0] if alpha.ndim == 1 else alpha.shape} coefficients for {len(deltas)} deltas")
    if np.any(alpha < -1e-12) or np.any(alpha > 1.0 + 1e-12):
        raise DomainError("merge coefficients must lie in [0, 1]")
    if abs(float(alpha.sum()) - 1.0) > 1e-9:
        raise DomainError(f"merge coefficients sum to {alpha.sum()}, not 1")
    shape = deltas[0].shape
    for d in deltas[1:]:
        if d.shape != shape:
            raise ShapeError("expert deltas have mismatched shapes")
    out = np.zeros(shape)
    for coeff, delta in zip(alpha, deltas):
        out += coeff * delta
    return out


def param_count_report(
    backbone: BackboneParams, expert_sets: Sequence[ExpertAdapterSet]
) -> dict:
    """Exact storage counts: backbone vs one expert, plus their ratio."""
    backbone_params = sum(w.size for w in backbone.weights.values())
    counts = [e.param_count for e in expert_sets]
    if counts and len(set(counts)) != 1:
        raise IncompatibleModelsError(f"expert sets have mixed parameter counts {counts}")
    per_expert = counts[0] if counts else 0
    return {
        "backbone_params": backbone_params,
        "per_expert_params": per_expert,
        "n_experts": len(expert_sets),
        "ratio": per_expert / backbone_params,
    }


# ---------------------------------------------------------------------------
# graph-level pieces used by the trainers


def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def adapter_tensors(
    expert: ExpertAdapterSet, trainable: bool = False
) -> dict[LayerKey, tuple[Tensor, Tensor]]:
    return {
        key: (Tensor(a.a, requires_grad=trainable), Tensor(a.b, requires_grad=trainable))
        for key, a in expert.adapters.items()
    }


def lora_projector(
    weights: Mapping[str, Tensor],
    expert: ExpertAdapterSet,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    factors: Mapping[LayerKey, tuple[Tensor, Tensor]] | None = None,
) -> Projector:
    """Projection with the low-rank residual path added to each base weight.

    Dropout hits the adapter input only, in train mode, and only when an rng
    is supplied; the base path always sees the raw activation.
    """
    if factors is None:
        factors = adapter_tensors(expert)

    def project(key: LayerKey, x: Tensor) -> Tensor:
        base = ad.matmul(x, weights[weight_name(key)])
        adapter = expert.adapters[key]
        a_t, b_t = factors[key]
        x_in = x
        if mode == "train" and rng is not None and adapter.dropout_p > 0.0:
            x_in = ad.mul(x, Tensor(dropout_mask(x.shape, adapter.dropout_p, rng)))
        residual = ad.mul(ad.matmul(ad.matmul(x_in, a_t), b_t), adapter.scale / adapter.rank)
        return ad.add(base, residual)

    return project
