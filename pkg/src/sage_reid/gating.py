"""Input-adaptive fusion of expert residuals.

Per adapted layer, each expert contributes a residual ``x @ delta_i``. The
gate L2-normalizes every residual token-row, flattens token-major, projects
with a single learnable vector ``p``, and softmaxes under a learnable
temperature into simplex coefficients ``alpha``. The layer output is the
frozen averaged weight's response plus the alpha-weighted residual sum, all
from residuals computed once per forward pass.

Temperature positivity comes from the parameterization
``tau = softplus(theta) + 0.01``; theta is unconstrained. With ``p = 0`` the
gate is exactly uniform, i.e. plain adapter averaging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ShapeError
from .model import BackboneConfig, LayerKey, Projector, layer_dims, layer_keys, weight_name
from .lora import dropout_mask

TAU_FLOOR = 0.01
# softplus(theta) + TAU_FLOOR == 1
THETA_UNIT_TAU = math.log(math.expm1(1.0 - TAU_FLOOR))


@dataclass
class LayerGate:
    p: np.ndarray          # (tokens * d_out,)
    theta_tau: np.ndarray  # 0-d; tau = softplus(theta) + TAU_FLOOR

    def copy(self) -> "LayerGate":
        return LayerGate(self.p.copy(), self.theta_tau.copy())


@dataclass
class GateParams:
    layers: dict[LayerKey, LayerGate]

    def copy(self) -> "GateParams":
        return GateParams({k: g.copy() for k, g in self.layers.items()})


def init_gates(config: BackboneConfig) -> GateParams:
    """Zero projections (uniform alpha at step 0) and tau = 1."""
    layers = {}
    for key in layer_keys(config):
        _, d_out = layer_dims(config, key)
        layers[key] = LayerGate(
            p=np.zeros(config.tokens * d_out),
            theta_tau=np.asarray(THETA_UNIT_TAU, dtype=np.float64),
        )
    return GateParams(layers)


def tau_value(theta: float | np.ndarray) -> float:
    return float(np.logaddexp(0.0, theta) + TAU_FLOOR)


def gate_param_cost(config: BackboneConfig, n_experts: int) -> dict:
    """Storage of this gate vs a per-expert-projection mixture-of-experts gate.

    Ours is one (tokens * d_out) vector plus a temperature per layer and does
    not depend on the expert count; the reference design needs s projections
    of length s * tokens * d_out per layer.
    """
    gate_params = 0
    mole_reference = 0
    for key in layer_keys(config):
        _, d_out = layer_dims(config, key)
        gate_params += config.tokens * d_out + 1
        mole_reference += n_experts * n_experts * config.tokens * d_out
    return {"gate_params": gate_params, "mole_reference_params": mole_reference}


# ---------------------------------------------------------------------------
# graph-level core (single source of truth for the public numpy ops)


def _alpha_from_residuals(
    residuals: Sequence[Tensor], p: Tensor, tau: Tensor | float
) -> Tensor:
    """Gate coefficients (B, s) from per-expert residual batches (B, k, d)."""
    batch = residuals[0].shape[0]
    flat_len = residuals[0].shape[1] * residuals[0].shape[2]
    p_col = ad.reshape(p, (flat_len, 1))
    cols = []
    for e in residuals:
        normed = ad.l2_normalize(e, axis=-1)
        flat = ad.reshape(normed, (batch, flat_len))
        cols.append(ad.matmul(flat, p_col))
    logits = ad.concat(cols, axis=1)
    return ad.softmax(logits, tau=tau, axis=1)


def gated_layer(
    x: Tensor,
    w0: Tensor,
    deltas: Sequence[Tensor],
    p: Tensor,
    theta: Tensor,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout_p: float = 0.0,
    monitor: Callable[[np.ndarray], None] | None = None,
) -> Tensor:
    """One gated projection on a (B, k, d_in) activation batch.

    Residuals are computed once and reused for both the gate logits and the
    mixed output. Dropout (train mode only) masks the residual-path input,
    shared across experts, mirroring the stage-1 adapter path.
    """
    base = ad.matmul(x, w0)
    x_in = x
    if mode == "train" and rng is not None and dropout_p > 0.0:
        x_in = ad.mul(x, Tensor(dropout_mask(x.shape, dropout_p, rng)))
    residuals = [ad.matmul(x_in, d) for d in deltas]
    tau = ad.add(ad.softplus(theta), TAU_FLOOR)
    alpha = _alpha_from_residuals(residuals, p, tau)
    if monitor is not None:
        monitor(alpha.data)
    batch = x.shape[0]
    out = base
    for i, e in enumerate(residuals):
        coeff = ad.reshape(alpha[(slice(None), i)], (batch, 1, 1))
        out = ad.add(out, ad.mul(coeff, e))
    return out


def gated_projector(
    weights: Mapping[str, Tensor],
    delta_tensors: Mapping[LayerKey, Sequence[Tensor]],
    gate_tensors: Mapping[LayerKey, tuple[Tensor, Tensor]],
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout_p: float = 0.0,
    monitor: Callable[[LayerKey, np.ndarray], None] | None = None,
) -> Projector:
    def project(key: LayerKey, x: Tensor) -> Tensor:
        p_t, theta_t = gate_tensors[key]
        layer_monitor = None if monitor is None else (lambda a, k=key: monitor(k, a))
        return gated_layer(
            x,
            weights[weight_name(key)],
            delta_tensors[key],
            p_t,
            theta_t,
            mode=mode,
            rng=rng,
            dropout_p=dropout_p,
            monitor=layer_monitor,
        )

    return project


# ---------------------------------------------------------------------------
# public single-sample operations


def expert_residuals(x: np.ndarray, deltas: Sequence[np.ndarray]) -> np.ndarray:
    """Stack of x @ delta_i, shape (s, k, d_out)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a (tokens, d_in) activation, got {x.shape}")
    out = []
    for d in deltas:
        if d.shape[0] != x.shape[1]:
            raise ShapeError(f"activation {x.shape} does not match delta {d.shape}")
        out.append(x @ d)
    return np.stack(out)


def gate_coefficients(residuals: np.ndarray, p: np.ndarray, tau: float) -> np.ndarray:
    """Simplex coefficients over experts for one sample's residual stack."""
    if tau <= 0.0:
        raise DomainError("gate temperature must be positive")
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.ndim != 3:
        raise ShapeError(f"expected (s, tokens, d_out) residuals, got {residuals.shape}")
    tensors = [Tensor(residuals[i][None]) for i in range(residuals.shape[0])]
    alpha = _alpha_from_residuals(tensors, Tensor(p), float(tau))
    return alpha.data[0]


def gated_forward(
    x: np.ndarray,
    w0: np.ndarray,
    deltas: Sequence[np.ndarray],
    gate: LayerGate,
) -> np.ndarray:
    """Single-sample gated layer output x @ w0 + sum_i alpha_i (x @ delta_i)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w0.shape[0]:
        raise ShapeError(f"activation {x.shape} does not match weight {w0.shape}")
    out = gated_layer(
        Tensor(x[None]),
        Tensor(w0),
        [Tensor(np.asarray(d, dtype=np.float64)) for d in deltas],
        Tensor(gate.p),
        Tensor(gate.theta_tau),
    )
    return out.data[0]
