"""Mapping between pipeline structures and the binary tensor container."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import read_checkpoint, write_checkpoint
from .errors import FormatError
from .gating import GateParams, LayerGate
from .lora import ExpertAdapterSet, LoraAdapter, LoraConfig
from .model import BackboneConfig, BackboneParams, HeadParams, LayerKey
from .pipeline import AdaptationResult, ClusterEpoch, MergedModel, SourceCheckpoint


def _head_arrays(head: HeadParams, prefix: str = "head.") -> dict[str, np.ndarray]:
    return {
        f"{prefix}bn_scale": head.bn_scale,
        f"{prefix}bn_offset": head.bn_offset,
        f"{prefix}bn_running_mean": head.bn_running_mean,
        f"{prefix}bn_running_var": head.bn_running_var,
        f"{prefix}classifier": head.classifier,
    }


def _head_from(tensors: dict[str, np.ndarray], prefix: str = "head.") -> HeadParams:
    return HeadParams(
        bn_scale=tensors[f"{prefix}bn_scale"],
        bn_offset=tensors[f"{prefix}bn_offset"],
        bn_running_mean=tensors[f"{prefix}bn_running_mean"],
        bn_running_var=tensors[f"{prefix}bn_running_var"],
        classifier=tensors[f"{prefix}classifier"],
    )


def _parse_layer_key(text: str) -> LayerKey:
    # "blocks.<b>.<slot>"
    _, block, slot = text.split(".")
    return int(block), slot


def save_source_checkpoint(path: str | Path, ckpt: SourceCheckpoint) -> None:
    tensors = {f"backbone.{k}": v for k, v in ckpt.backbone.weights.items()}
    tensors.update(_head_arrays(ckpt.head))
    write_checkpoint(
        path,
        tensors,
        metadata={
            "kind": "source",
            "source_id": ckpt.source_id,
            "backbone_config": asdict(ckpt.backbone.config),
            "loss_history": ckpt.loss_history,
            "frozen_digest": ckpt.frozen_digest,
        },
    )


def load_source_checkpoint(path: str | Path) -> SourceCheckpoint:
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "source":
        raise FormatError(f"expected a source checkpoint, found {meta.get('kind')!r}", 0)
    config = BackboneConfig(**meta["backbone_config"])
    weights = {
        k[len("backbone."):]: v for k, v in tensors.items() if k.startswith("backbone.")
    }
    return SourceCheckpoint(
        backbone=BackboneParams(config, weights),
        head=_head_from(tensors),
        source_id=int(meta["source_id"]),
        loss_history=list(meta.get("loss_history", [])),
        frozen_digest=meta.get("frozen_digest", ""),
    )


def _adapter_arrays(expert: ExpertAdapterSet, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for key in sorted(expert.adapters):
        adapter = expert.adapters[key]
        out[f"{prefix}blocks.{key[0]}.{key[1]}.a"] = adapter.a
        out[f"{prefix}blocks.{key[0]}.{key[1]}.b"] = adapter.b
    return out


def _expert_from(
    tensors: dict[str, np.ndarray], prefix: str, source_id: int, lora: LoraConfig
) -> ExpertAdapterSet:
    adapters: dict[LayerKey, LoraAdapter] = {}
    for name, arr in tensors.items():
        if not (name.startswith(prefix) and name.endswith(".a")):
            continue
        key = _parse_layer_key(name[len(prefix):-2])
        adapters[key] = LoraAdapter(
            a=arr,
            b=tensors[f"{prefix}blocks.{key[0]}.{key[1]}.b"],
            rank=arr.shape[1],
            scale=lora.scale,
            dropout_p=lora.dropout,
            layer_key=key,
        )
    return ExpertAdapterSet(source_id, adapters)


def save_expert(
    path: str | Path,
    result: AdaptationResult,
    lora: LoraConfig,
    source_checkpoint_name: str,
) -> None:
    tensors = _adapter_arrays(result.expert, "adapter.")
    if result.target_head is not None:
        tensors.update(_head_arrays(result.target_head))
    write_checkpoint(
        path,
        tensors,
        metadata={
            "kind": "expert",
            "source_id": result.expert.source_id,
            "lora": asdict(lora),
            "source_checkpoint": source_checkpoint_name,
            "history": [asdict(h) for h in result.history],
            "has_head": result.target_head is not None,
        },
    )


def load_expert(path: str | Path) -> tuple[AdaptationResult, LoraConfig, str]:
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "expert":
        raise FormatError(f"expected an expert checkpoint, found {meta.get('kind')!r}", 0)
    lora = LoraConfig(**meta["lora"])
    expert = _expert_from(tensors, "adapter.", int(meta["source_id"]), lora)
    head = _head_from(tensors) if meta.get("has_head") else None
    history = [ClusterEpoch(**h) for h in meta.get("history", [])]
    result = AdaptationResult(expert=expert, target_head=head, history=history)
    return result, lora, meta["source_checkpoint"]


def save_merged(path: str | Path, model: MergedModel, lora: LoraConfig) -> None:
    tensors = {f"backbone.{k}": v for k, v in model.backbone.weights.items()}
    for expert in model.experts:
        tensors.update(_adapter_arrays(expert, f"expert.{expert.source_id}."))
    for key, gate in model.gates.layers.items():
        tensors[f"gate.blocks.{key[0]}.{key[1]}.p"] = gate.p
        tensors[f"gate.blocks.{key[0]}.{key[1]}.theta"] = gate.theta_tau
    if model.target_head is not None:
        tensors.update(_head_arrays(model.target_head))
    write_checkpoint(
        path,
        tensors,
        metadata={
            "kind": "merged",
            "source_ids": model.source_ids,
            "backbone_config": asdict(model.backbone.config),
            "lora": asdict(lora),
            "has_head": model.target_head is not None,
            "frozen_digest": model.frozen_digest,
        },
    )


def load_merged(path: str | Path) -> tuple[MergedModel, LoraConfig]:
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "merged":
        raise FormatError(f"expected a merged checkpoint, found {meta.get('kind')!r}", 0)
    config = BackboneConfig(**meta["backbone_config"])
    lora = LoraConfig(**meta["lora"])
    weights = {
        k[len("backbone."):]: v for k, v in tensors.items() if k.startswith("backbone.")
    }
    experts = [
        _expert_from(tensors, f"expert.{sid}.", int(sid), lora)
        for sid in meta["source_ids"]
    ]
    gates: dict[LayerKey, LayerGate] = {}
    for name, arr in tensors.items():
        if name.startswith("gate.") and name.endswith(".p"):
            key = _parse_layer_key(name[len("gate."):-2])
            gates[key] = LayerGate(
                p=arr, theta_tau=tensors[f"gate.blocks.{key[0]}.{key[1]}.theta"]
            )
    model = MergedModel(
        backbone=BackboneParams(config, weights),
        experts=experts,
        gates=GateParams(gates),
        target_head=_head_from(tensors) if meta.get("has_head") else None,
        source_ids=[int(s) for s in meta["source_ids"]],
        frozen_digest=meta.get("frozen_digest", ""),
    )
    return model, lora
