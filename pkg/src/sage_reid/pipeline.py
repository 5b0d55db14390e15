"""The three training procedures and the model containers they produce.

Stage 0 (supervised pretraining) trains a backbone and head per labeled
source domain, then freezes everything into a checkpoint. Stage 1 adapts
each frozen source model to the unlabeled target by training only a LoRA
expert and a target head against DBSCAN pseudo-labels. Stage 2 averages the
frozen source backbones, keeps the experts frozen, and trains only the
per-layer gates plus a fresh target head, one epoch by default.

All source backbones start from one shared initialization (the stand-in for
a common pretrained checkpoint); without that, weight averaging across
sources would be meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DomainData, SyntheticDataset, arrays_digest, dataset_arrays
from .errors import (
    GateTrainingError,
    IncompatibleModelsError,
    NumericError,
    TrainingDivergedError,
)
from .evaluation import EvalSplit, evaluate_split
from .gating import GateParams, gated_projector, init_gates
from .lora import (
    ExpertAdapterSet,
    LoraConfig,
    adapter_tensors,
    average_backbones,
    expert_deltas,
    init_expert_adapters,
    lora_projector,
    validate_expert,
)
from .losses import SamplerConfig, combined_loss, pk_sample
from .model import (
    BackboneConfig,
    BackboneParams,
    HeadParams,
    encode,
    head_apply,
    init_backbone,
    init_head,
    plain_projector,
    tensor_view,
)
from .pseudo import PseudoLabelSet, dbscan, pairwise_distance, select_eps
from .rng import derive_rng

Logger = Callable[[str], None]


def _silent(_: str) -> None:
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_source: int = 30
    epochs_adapt: int = 10
    epochs_gate: int = 1
    lr: float = 0.008
    momentum: float = 0.9
    lam: float = 1.0
    margin: float = 0.3
    p: int = 4
    k: int = 4
    dbscan_min_pts: int = 4
    eps_percentile: float = 2.0
    train_bn_affine: bool = True
    seed: int = 0


@dataclass
class SourceCheckpoint:
    backbone: BackboneParams
    head: HeadParams
    source_id: int
    loss_history: list[float] = field(default_factory=list)
    frozen_digest: str = ""

    def __post_init__(self):
        if not self.frozen_digest:
            self.frozen_digest = arrays_digest(self.backbone.weights)


@dataclass
class ClusterEpoch:
    epoch: int
    n_clusters: int
    n_noise: int
    loss: float


@dataclass
class AdaptationResult:
    expert: ExpertAdapterSet
    target_head: HeadParams | None
    history: list[ClusterEpoch]


@dataclass
class MergedModel:
    backbone: BackboneParams  # averaged across sources, frozen
    experts: list[ExpertAdapterSet]  # frozen after stage 1
    gates: GateParams
    target_head: HeadParams | None
    source_ids: list[int]
    frozen_digest: str = ""

    def __post_init__(self):
        if not self.frozen_digest:
            self.frozen_digest = self.compute_frozen_digest()

    def compute_frozen_digest(self) -> str:
        arrays = dict(self.backbone.weights)
        for expert in self.experts:
            for name, arr in expert.named_arrays().items():
                arrays[f"expert.{expert.source_id}.{name}"] = arr
        return arrays_digest(arrays)


class SGD:
    """Plain momentum SGD over named in-place array slots."""

    def __init__(self, slots: dict[str, np.ndarray], lr: float, momentum: float):
        self.slots = slots
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(arr) for name, arr in slots.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v += g
            self.slots[name] -= self.lr * v


def _contiguous_labels(ids: np.ndarray) -> tuple[np.ndarray, int]:
    uniq = np.unique(ids)
    index = {int(v): i for i, v in enumerate(uniq)}
    return np.array([index[int(v)] for v in ids], dtype=np.int64), uniq.size


def _leaves(slots: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: Tensor(arr, requires_grad=True) for name, arr in slots.items()}


def _head_slots(head: HeadParams, train_bn_affine: bool) -> dict[str, np.ndarray]:
    slots = {"head.classifier": head.classifier}
    if train_bn_affine:
        slots["head.bn_scale"] = head.bn_scale
        slots["head.bn_offset"] = head.bn_offset
    return slots


def _head_weights(leaves: dict[str, Tensor], head: HeadParams) -> dict[str, Tensor]:
    return {
        "classifier": leaves.get("head.classifier", Tensor(head.classifier)),
        "bn_scale": leaves.get("head.bn_scale", Tensor(head.bn_scale)),
        "bn_offset": leaves.get("head.bn_offset", Tensor(head.bn_offset)),
    }


def _grads_for(loss: Tensor, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    ad.backward(loss)
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in leaves.items()
    }


# ---------------------------------------------------------------------------
# feature extraction


def extract_features(
    backbone: BackboneParams,
    tokens: np.ndarray,
    expert: ExpertAdapterSet | None = None,
    normalize: bool = True,
) -> np.ndarray:
    """Eval-mode class-token features for a (N, tokens-1, d_in) stack."""
    weights = tensor_view(backbone.weights)
    if expert is None:
        project = plain_projector(weights)
    else:
        project = lora_projector(weights, expert, mode="eval")
    z = encode(backbone.config, weights, Tensor(tokens), project, mode="eval")
    feats = z.data
    if normalize:
        feats = ad.l2_normalize(feats, axis=-1).data
    return feats


def extract_features_merged(
    model: MergedModel,
    tokens: np.ndarray,
    normalize: bool = True,
    monitor: Callable | None = None,
) -> np.ndarray:
    weights = tensor_view(model.backbone.weights)
    per_expert = [expert_deltas(e) for e in model.experts]
    deltas = {
        key: [Tensor(d[key]) for d in per_expert] for key in model.gates.layers
    }
    gates = {
        key: (Tensor(g.p), Tensor(g.theta_tau)) for key, g in model.gates.layers.items()
    }
    project = gated_projector(weights, deltas, gates, mode="eval", monitor=monitor)
    z = encode(model.backbone.config, weights, Tensor(tokens), project, mode="eval")
    feats = z.data
    if normalize:
        feats = ad.l2_normalize(feats, axis=-1).data
    return feats


# ---------------------------------------------------------------------------
# stage 0: supervised source pretraining


def pretrain_source(
    dataset: SyntheticDataset,
    cfg: TrainConfig,
    backbone_cfg: BackboneConfig,
    source_id: int = 0,
    init_seed: int | None = None,
    log: Logger = _silent,
) -> SourceCheckpoint:
    """Train backbone + head with CE + triplet on one labeled source domain.

    ``init_seed`` defaults to a value derived from cfg.seed alone, so every
    source starts from the same initialization.
    """
    tokens, ids, _ = dataset_arrays(dataset)
    labels, n_classes = _contiguous_labels(ids)

    params = init_backbone(backbone_cfg, init_seed if init_seed is not None else cfg.seed)
    head = init_head(backbone_cfg.dim, n_classes, seed=cfg.seed * 1000 + source_id)
    sampler = SamplerConfig(cfg.p, cfg.k, seed=_sampler_seed(cfg.seed, "pretrain", source_id))

    slots = dict(params.weights)
    slots.update(_head_slots(head, cfg.train_bn_affine))
    opt = SGD(slots, cfg.lr, cfg.momentum)

    step = 0
    history = []
    for epoch in range(cfg.epochs_source):
        epoch_losses = []
        for batch in pk_sample(labels, sampler, epoch):
            batch_tokens = tokens[batch]
            batch_labels = labels[batch]
            leaves = _leaves(slots)
            try:
                z = encode(
                    backbone_cfg, leaves, Tensor(batch_tokens), plain_projector(leaves), mode="train"
                )
                _, logits = head_apply(
                    _head_weights(leaves, head), head, z, "train", update_running=True
                )
                loss = combined_loss(logits, batch_labels, z, cfg.margin, cfg.lam)
                grads = _grads_for(loss, leaves)
            except NumericError as err:
                raise TrainingDivergedError(str(err), step) from err
            opt.step({k: grads[k] for k in slots})
            epoch_losses.append(float(loss.data))
            step += 1
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        history.append(mean_loss)
        log(f"epoch={epoch} loss={mean_loss:.6f} clusters=0 noise=0")

    return SourceCheckpoint(
        backbone=params.copy(), head=head.copy(), source_id=source_id, loss_history=history
    )


def _sampler_seed(seed: int, stage: str, source_id: int) -> int:
    return int(derive_rng(seed, "sampler", stage, source_id).integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# stage 1: source-free adaptation of one expert


def _head_from_centroids(
    features: np.ndarray,
    labels: np.ndarray,
    n_clusters: int,
    previous: HeadParams | None,
) -> HeadParams:
    """Classifier columns from normalized cluster centroids; BN carries over."""
    dim = features.shape[1]
    classifier = np.zeros((dim, n_clusters))
    for c in range(n_clusters):
        centroid = features[labels == c].mean(axis=0)
        classifier[:, c] = ad.l2_normalize(centroid).data
    if previous is None:
        head = HeadParams(
            bn_scale=np.ones(dim),
            bn_offset=np.zeros(dim),
            bn_running_mean=np.zeros(dim),
            bn_running_var=np.ones(dim),
            classifier=classifier,
        )
    else:
        head = previous.copy()
        head.classifier = classifier
    return head


def _cluster_target(
    features: np.ndarray, cfg: TrainConfig, epoch: int
) -> PseudoLabelSet:
    dist = pairwise_distance(features)
    eps = select_eps(dist, cfg.eps_percentile)
    return dbscan(dist, eps, cfg.dbscan_min_pts, epoch=epoch)


def adapt_expert(
    ckpt: SourceCheckpoint,
    target: SyntheticDataset,
    cfg: TrainConfig,
    lora_cfg: LoraConfig,
    log: Logger = _silent,
) -> AdaptationResult:
    """Stage-1 self-training: per epoch, re-cluster target features and train
    only the LoRA pairs and the target head. The source backbone is frozen.

    An epoch whose clustering yields fewer than two clusters is skipped (no
    usable pseudo-supervision) and recorded in the history.
    """
    backbone_cfg = ckpt.backbone.config
    tokens, _, _ = dataset_arrays(target)
    expert = init_expert_adapters(
        backbone_cfg, lora_cfg, ckpt.source_id, seed=cfg.seed
    )

    head: HeadParams | None = None
    opt: SGD | None = None
    slots: dict[str, np.ndarray] = {}
    history: list[ClusterEpoch] = []
    step = 0

    for epoch in range(cfg.epochs_adapt):
        feats = extract_features(ckpt.backbone, tokens, expert)
        pls = _cluster_target(feats, cfg, epoch)
        n_noise = int(pls.noise_mask.sum())

        if pls.n_clusters < 2:
            log(f"epoch={epoch} loss=0.000000 clusters={pls.n_clusters} noise={n_noise}")
            history.append(ClusterEpoch(epoch, pls.n_clusters, n_noise, 0.0))
            continue

        if head is None or head.n_classes != pls.n_clusters:
            head = _head_from_centroids(feats, pls.labels, pls.n_clusters, head)
            slots = {f"expert.{k}.a": a.a for k, a in expert.adapters.items()}
            slots.update({f"expert.{k}.b": a.b for k, a in expert.adapters.items()})
            slots.update(_head_slots(head, cfg.train_bn_affine))
            opt = SGD(slots, cfg.lr, cfg.momentum)

        keep = np.flatnonzero(~pls.noise_mask)
        train_labels = pls.labels[keep]
        sampler = SamplerConfig(
            min(cfg.p, pls.n_clusters),
            cfg.k,
            seed=_sampler_seed(cfg.seed, "adapt", ckpt.source_id),
        )
        dropout_rng = derive_rng(cfg.seed, "adapt-dropout", ckpt.source_id, epoch)
        backbone_weights = tensor_view(ckpt.backbone.weights)

        epoch_losses = []
        for batch in pk_sample(train_labels, sampler, epoch):
            sample_idx = keep[batch]
            leaves = _leaves(slots)
            factors = {
                k: (leaves[f"expert.{k}.a"], leaves[f"expert.{k}.b"])
                for k in expert.adapters
            }
            project = lora_projector(
                backbone_weights, expert, mode="train", rng=dropout_rng, factors=factors
            )
            try:
                z = encode(
                    backbone_cfg, backbone_weights, Tensor(tokens[sample_idx]), project, mode="train"
                )
                _, logits = head_apply(
                    _head_weights(leaves, head), head, z, "train", update_running=True
                )
                loss = combined_loss(logits, train_labels[batch], z, cfg.margin, cfg.lam)
                grads = _grads_for(loss, leaves)
            except NumericError as err:
                raise TrainingDivergedError(str(err), step) from err
            opt.step({k: grads[k] for k in slots})
            epoch_losses.append(float(loss.data))
            step += 1

        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        log(f"epoch={epoch} loss={mean_loss:.6f} clusters={pls.n_clusters} noise={n_noise}")
        history.append(ClusterEpoch(epoch, pls.n_clusters, n_noise, mean_loss))

    return AdaptationResult(expert=expert, target_head=head, history=history)


# ---------------------------------------------------------------------------
# stage 2: merge and gate training


def build_merged_model(
    ckpts: Sequence[SourceCheckpoint], experts: Sequence[ExpertAdapterSet]
) -> MergedModel:
    """Averaged backbone + frozen experts + zero-initialized gates.

    With zero gates the model is exactly the uniform adapter average, the
    plain merging baseline stage 2 starts from.
    """
    if len(ckpts) != len(experts) or not ckpts:
        raise IncompatibleModelsError(f"{len(ckpts)} checkpoints vs {len(experts)} experts")
    for ckpt, expert in zip(ckpts, experts):
        validate_expert(expert, ckpt.backbone.config)
        if expert.source_id != ckpt.source_id:
            raise IncompatibleModelsError(
                f"expert {expert.source_id} does not belong to checkpoint {ckpt.source_id}"
            )
    backbone = average_backbones([c.backbone for c in ckpts])
    return MergedModel(
        backbone=backbone,
        experts=[e.copy() for e in experts],
        gates=init_gates(backbone.config),
        target_head=None,
        source_ids=[c.source_id for c in ckpts],
    )


def train_gate(
    model: MergedModel,
    target: SyntheticDataset,
    cfg: TrainConfig,
    lora_dropout: float = 0.0,
    log: Logger = _silent,
    alpha_monitor: Callable | None = None,
) -> MergedModel:
    """Stage-2 training: only gate parameters and the target head move.

    Aborts with :class:`GateTrainingError` when clustering the target yields
    no usable pseudo-labels, since the gate loss is undefined without them.
    """
    backbone_cfg = model.backbone.config
    tokens, _, _ = dataset_arrays(target)

    feats = extract_features_merged(model, tokens)
    pls = _cluster_target(feats, cfg, 0)
    if pls.n_clusters == 0:
        raise GateTrainingError("DBSCAN produced zero clusters; gate has no supervision")
    if pls.n_clusters < 2:
        raise GateTrainingError("a single cluster cannot supervise the gate (no triplets)")

    head = _head_from_centroids(feats, pls.labels, pls.n_clusters, None)
    model.target_head = head

    slots: dict[str, np.ndarray] = {}
    for key, gate in model.gates.layers.items():
        slots[f"gate.{key}.p"] = gate.p
        slots[f"gate.{key}.theta"] = gate.theta_tau
    slots.update(_head_slots(head, cfg.train_bn_affine))
    opt = SGD(slots, cfg.lr, cfg.momentum)

    per_expert = [expert_deltas(e) for e in model.experts]
    delta_arrays = {
        key: [d[key] for d in per_expert] for key in model.gates.layers
    }
    backbone_weights = tensor_view(model.backbone.weights)

    keep = np.flatnonzero(~pls.noise_mask)
    train_labels = pls.labels[keep]
    sampler = SamplerConfig(
        min(cfg.p, pls.n_clusters), cfg.k, seed=_sampler_seed(cfg.seed, "gate", 0)
    )
    step = 0
    for epoch in range(cfg.epochs_gate):
        dropout_rng = derive_rng(cfg.seed, "gate-dropout", epoch)
        epoch_losses = []
        for batch in pk_sample(train_labels, sampler, epoch):
            sample_idx = keep[batch]
            leaves = _leaves(slots)
            deltas = {k: [Tensor(d) for d in ds] for k, ds in delta_arrays.items()}
            gates = {
                k: (leaves[f"gate.{k}.p"], leaves[f"gate.{k}.theta"])
                for k in model.gates.layers
            }
            project = gated_projector(
                backbone_weights,
                deltas,
                gates,
                mode="train",
                rng=dropout_rng,
                dropout_p=lora_dropout,
                monitor=alpha_monitor,
            )
            try:
                z = encode(
                    backbone_cfg, backbone_weights, Tensor(tokens[sample_idx]), project, mode="train"
                )
                _, logits = head_apply(
                    _head_weights(leaves, head), head, z, "train", update_running=True
                )
                loss = combined_loss(logits, train_labels[batch], z, cfg.margin, cfg.lam)
                grads = _grads_for(loss, leaves)
            except NumericError as err:
                raise TrainingDivergedError(str(err), step) from err
            opt.step({k: grads[k] for k in slots})
            epoch_losses.append(float(loss.data))
            step += 1
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        n_noise = int(pls.noise_mask.sum())
        log(f"epoch={epoch} loss={mean_loss:.6f} clusters={pls.n_clusters} noise={n_noise}")

    return model


# ---------------------------------------------------------------------------
# evaluation shortcuts


def _split_for(
    domain: DomainData, features_of: Callable[[np.ndarray], np.ndarray]
) -> EvalSplit:
    q_tokens, q_ids, q_cams = dataset_arrays(domain.query)
    g_tokens, g_ids, g_cams = dataset_arrays(domain.gallery)
    return EvalSplit(
        query_features=features_of(q_tokens),
        query_ids=q_ids,
        query_cams=q_cams,
        gallery_features=features_of(g_tokens),
        gallery_ids=g_ids,
        gallery_cams=g_cams,
    )


def evaluate_backbone(
    backbone: BackboneParams, domain: DomainData, expert: ExpertAdapterSet | None = None
) -> dict:
    split = _split_for(domain, lambda t: extract_features(backbone, t, expert))
    return evaluate_split(split)


def evaluate_merged(model: MergedModel, domain: DomainData) -> dict:
    split = _split_for(domain, lambda t: extract_features_merged(model, t))
    return evaluate_split(split)
