"""Desk-scale transformer encoder backbone and BNNeck head.

The backbone is a small pre-norm transformer: a linear patch embedding over
synthetic content tokens, a learned class token, and ``n_blocks`` encoder
blocks with multi-head attention and a GELU MLP. The feature is the class
token after the final block. Six projection matrices per block (query, key,
value, output, up, down) are the adaptation points; each is addressable by
a stable layer key ``(block, slot)``.

The head is a BNNeck: 1-D batch norm, L2 normalization, then a bias-free
classifier. Metric losses consume the pre-BN feature; the classifier
consumes the normalized one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .rng import derive_rng

LayerKey = tuple[int, str]

ADAPTED_SLOTS = ("q", "k", "v", "o", "up", "down")

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class BackboneConfig:
    n_blocks: int = 2
    dim: int = 32
    tokens: int = 5  # includes the class token
    heads: int = 2
    token_dim: int = 16

    def __post_init__(self):
        if min(self.n_blocks, self.dim, self.tokens, self.heads, self.token_dim) <= 0:
            raise ConfigError("all backbone dimensions must be positive")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.tokens < 2:
            raise ConfigError("need at least one content token plus the class token")

    @property
    def hidden(self) -> int:
        return 4 * self.dim

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def layer_keys(config: BackboneConfig) -> list[LayerKey]:
    return [(b, s) for b in range(config.n_blocks) for s in ADAPTED_SLOTS]


def layer_dims(config: BackboneConfig, key: LayerKey) -> tuple[int, int]:
    """(input dim, output dim) of the projection at ``key``."""
    _, slot = key
    if slot in ("q", "k", "v", "o"):
        return config.dim, config.dim
    if slot == "up":
        return config.dim, config.hidden
    if slot == "down":
        return config.hidden, config.dim
    raise KeyError(f"unknown slot {slot!r}")


def weight_name(key: LayerKey) -> str:
    block, slot = key
    return f"blocks.{block}.{slot}"


@dataclass
class BackboneParams:
    config: BackboneConfig
    weights: dict[str, np.ndarray]

    def weight_for(self, key: LayerKey) -> np.ndarray:
        return self.weights[weight_name(key)]

    def copy(self) -> "BackboneParams":
        return BackboneParams(self.config, {k: v.copy() for k, v in self.weights.items()})


@dataclass
class HeadParams:
    bn_scale: np.ndarray
    bn_offset: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    classifier: np.ndarray  # (D, C), bias-free

    def __post_init__(self):
        if np.any(self.bn_running_var < 0):
            raise ConfigError("running variance must be nonnegative")

    @property
    def n_classes(self) -> int:
        return self.classifier.shape[1]

    def copy(self) -> "HeadParams":
        return HeadParams(
            self.bn_scale.copy(),
            self.bn_offset.copy(),
            self.bn_running_mean.copy(),
            self.bn_running_var.copy(),
            self.classifier.copy(),
        )


def expected_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed": (config.token_dim, config.dim),
        "cls_token": (config.dim,),
    }
    for b in range(config.n_blocks):
        shapes[f"blocks.{b}.ln1_scale"] = (config.dim,)
        shapes[f"blocks.{b}.ln1_offset"] = (config.dim,)
        for slot in ADAPTED_SLOTS:
            shapes[weight_name((b, slot))] = layer_dims(config, (b, slot))
        shapes[f"blocks.{b}.ln2_scale"] = (config.dim,)
        shapes[f"blocks.{b}.ln2_offset"] = (config.dim,)
    return shapes


def init_backbone(config: BackboneConfig, seed: int) -> BackboneParams:
    """Xavier-uniform matrices, unit layer-norm scales. Deterministic in seed."""
    rng = derive_rng(seed, "backbone-init")

    def xavier(shape: tuple[int, ...]) -> np.ndarray:
        fan_in, fan_out = (shape + (1,))[:2] if len(shape) == 1 else shape
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    weights: dict[str, np.ndarray] = {}
    weights["patch_embed"] = xavier((config.token_dim, config.dim))
    weights["cls_token"] = xavier((config.dim,))
    for b in range(config.n_blocks):
        weights[f"blocks.{b}.ln1_scale"] = np.ones(config.dim)
        weights[f"blocks.{b}.ln1_offset"] = np.zeros(config.dim)
        for slot in ADAPTED_SLOTS:
            weights[weight_name((b, slot))] = xavier(layer_dims(config, (b, slot)))
        weights[f"blocks.{b}.ln2_scale"] = np.ones(config.dim)
        weights[f"blocks.{b}.ln2_offset"] = np.zeros(config.dim)
    return BackboneParams(config, weights)


def init_head(dim: int, n_classes: int, seed: int) -> HeadParams:
    if n_classes < 1:
        raise ConfigError("head needs at least one class")
    rng = derive_rng(seed, "head-init")
    bound = math.sqrt(6.0 / (dim + n_classes))
    return HeadParams(
        bn_scale=np.ones(dim),
        bn_offset=np.zeros(dim),
        bn_running_mean=np.zeros(dim),
        bn_running_var=np.ones(dim),
        classifier=rng.uniform(-bound, bound, size=(dim, n_classes)),
    )


def tensor_view(arrays: Mapping[str, np.ndarray], trainable: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=trainable) for k, v in arrays.items()}


# ---------------------------------------------------------------------------
# graph-level forward (shared by training and the public wrappers)

Projector = Callable[[LayerKey, Tensor], Tensor]


def plain_projector(weights: Mapping[str, Tensor]) -> Projector:
    def project(key: LayerKey, x: Tensor) -> Tensor:
        return ad.matmul(x, weights[weight_name(key)])

    return project


def _layer_norm(x: Tensor, scale: Tensor, offset: Tensor) -> Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.mean(ad.mul(centered, centered), axis=-1, keepdims=True)
    normed = ad.div(centered, ad.sqrt(ad.add(var, LN_EPS)))
    return ad.add(ad.mul(normed, scale), offset)


def _attention(config: BackboneConfig, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    dh = config.head_dim
    outs = []
    for h in range(config.heads):
        cols = (slice(None), slice(None), slice(h * dh, (h + 1) * dh))
        qh, kh, vh = q[cols], k[cols], v[cols]
        scores = ad.div(ad.matmul(qh, ad.transpose(kh)), math.sqrt(dh))
        outs.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
    return ad.concat(outs, axis=-1)


def encode(
    config: BackboneConfig,
    weights: Mapping[str, Tensor],
    tokens: Tensor,
    project: Projector,
    mode: str = "eval",
) -> Tensor:
    """Batched forward: tokens (B, tokens-1, token_dim) -> features (B, dim)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if tokens.ndim != 3 or tokens.shape[1:] != (config.tokens - 1, config.token_dim):
        raise ShapeError(
            f"expected tokens of shape (B, {config.tokens - 1}, {config.token_dim}), "
            f"got {tokens.shape}"
        )
    batch = tokens.shape[0]
    x = ad.matmul(tokens, weights["patch_embed"])
    cls = ad.reshape(weights["cls_token"], (1, 1, config.dim))
    cls_row = ad.mul(Tensor(np.ones((batch, 1, 1))), cls)
    x = ad.concat([cls_row, x], axis=1)

    for b in range(config.n_blocks):
        h = _layer_norm(x, weights[f"blocks.{b}.ln1_scale"], weights[f"blocks.{b}.ln1_offset"])
        attn = _attention(
            config,
            project((b, "q"), h),
            project((b, "k"), h),
            project((b, "v"), h),
        )
        x = ad.add(x, project((b, "o"), attn))
        h2 = _layer_norm(x, weights[f"blocks.{b}.ln2_scale"], weights[f"blocks.{b}.ln2_offset"])
        x = ad.add(x, project((b, "down"), ad.gelu(project((b, "up"), h2))))

    return x[(slice(None), 0)]


def head_apply(
    weights: Mapping[str, Tensor],
    head: HeadParams,
    z: Tensor,
    mode: str,
    update_running: bool = False,
) -> tuple[Tensor, Tensor]:
    """BNNeck on a (B, D) feature batch: returns (normalized feature, logits)."""
    if head.n_classes < 1:
        raise ConfigError("classifier has no classes")
    if mode == "train":
        mu = ad.mean(z, axis=0, keepdims=True)
        centered = ad.sub(z, mu)
        var = ad.mean(ad.mul(centered, centered), axis=0, keepdims=True)
        normed = ad.div(centered, ad.sqrt(ad.add(var, BN_EPS)))
        if update_running:
            m = BN_MOMENTUM
            head.bn_running_mean *= 1.0 - m
            head.bn_running_mean += m * mu.data.reshape(-1)
            head.bn_running_var *= 1.0 - m
            head.bn_running_var += m * var.data.reshape(-1)
    elif mode == "eval":
        centered = ad.sub(z, Tensor(head.bn_running_mean))
        normed = ad.div(centered, ad.sqrt(Tensor(head.bn_running_var + BN_EPS)))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    z_bn = ad.add(ad.mul(normed, weights["bn_scale"]), weights["bn_offset"])
    z_norm = ad.l2_normalize(z_bn, axis=-1)
    logits = ad.matmul(z_norm, weights["classifier"])
    return z_norm, logits


# ---------------------------------------------------------------------------
# public single-call wrappers over raw arrays


def forward_backbone(
    params: BackboneParams,
    adapters=None,
    tokens: np.ndarray | None = None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Feature extraction from raw token arrays.

    ``tokens`` may be a single (tokens-1, token_dim) sample or a batch with a
    leading axis. ``adapters`` is an expert adapter set whose low-rank deltas
    are added to every adapted projection. Deterministic in eval mode.
    """
    arr = np.asarray(tokens, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    weights = tensor_view(params.weights)
    if adapters is None:
        project = plain_projector(weights)
    else:
        from .lora import lora_projector  # late import to avoid a cycle

        project = lora_projector(weights, adapters, mode=mode, rng=rng)
    z = encode(params.config, weights, Tensor(arr), project, mode=mode)
    return z.data[0] if single else z.data


def head_forward(
    head: HeadParams, z: np.ndarray, mode: str
) -> tuple[np.ndarray, np.ndarray]:
    """BNNeck forward on a feature vector or batch of features.

    Train mode uses batch statistics and updates the running ones; eval mode
    is pure and uses the running statistics.
    """
    arr = np.asarray(z, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None]
    weights = {
        "bn_scale": Tensor(head.bn_scale),
        "bn_offset": Tensor(head.bn_offset),
        "classifier": Tensor(head.classifier),
    }
    z_norm, logits = head_apply(
        weights, head, Tensor(arr), mode, update_running=(mode == "train")
    )
    if single:
        return z_norm.data[0], logits.data[0]
    return z_norm.data, logits.data
