"""End-to-end trend experiment on synthetic domains.

One run pretrains three source models (plus a blended-pool baseline trained
on the union of the sources), adapts a LoRA expert per source to the
unlabeled target, then compares:

* averaged source backbone vs the blend-pretrained backbone, zero-shot;
* each adapted expert vs its own source-only baseline;
* the trained gate vs the uniform adapter average it starts from.

Everything is deterministic in the seed, so repeated runs give the same
numbers and multi-seed tallies are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import build_domain_specs, generate_domains, pool_datasets, trend_requests
from .lora import LoraConfig, average_backbones
from .model import BackboneConfig
from .pipeline import (
    TrainConfig,
    adapt_expert,
    build_merged_model,
    evaluate_backbone,
    evaluate_merged,
    pretrain_source,
    train_gate,
)


@dataclass
class TrendResult:
    seed: int
    map_blend_pretrain: float      # blended-pool supervised model, zero-shot
    map_avg_pretrain: float        # averaged source backbones, zero-shot
    map_source_only: list[float]   # per source, zero-shot
    map_adapted: list[float]       # per source, after stage-1 adaptation
    map_lora_avg: float            # merged model with uniform gates
    map_gated: float               # merged model after gate training


def default_trend_train_config(seed: int) -> TrainConfig:
    return TrainConfig(seed=seed)


def run_trend_seed(
    seed: int,
    *,
    backbone_cfg: BackboneConfig | None = None,
    train_cfg: TrainConfig | None = None,
    lora_cfg: LoraConfig | None = None,
    n_sources: int = 3,
    log=lambda _msg: None,
) -> TrendResult:
    backbone_cfg = backbone_cfg or BackboneConfig()
    train_cfg = train_cfg or default_trend_train_config(seed)
    lora_cfg = lora_cfg or LoraConfig()

    requests = trend_requests(n_sources)
    specs = build_domain_specs(seed, requests, backbone_cfg.token_dim)
    domains = generate_domains(
        seed, specs, backbone_cfg.token_dim, content_tokens=backbone_cfg.tokens - 1
    )
    sources, target = domains[:n_sources], domains[n_sources]

    ckpts = [
        pretrain_source(dom.train, train_cfg, backbone_cfg, source_id=i)
        for i, dom in enumerate(sources)
    ]
    blended = pool_datasets([dom.train for dom in sources])
    blend_ckpt = pretrain_source(blended, train_cfg, backbone_cfg, source_id=100)

    avg_backbone = average_backbones([c.backbone for c in ckpts])
    map_avg = evaluate_backbone(avg_backbone, target)["mAP"]
    map_blend = evaluate_backbone(blend_ckpt.backbone, target)["mAP"]
    map_source_only = [evaluate_backbone(c.backbone, target)["mAP"] for c in ckpts]

    adaptations = [
        adapt_expert(c, target.train, train_cfg, lora_cfg, log=log) for c in ckpts
    ]
    map_adapted = [
        evaluate_backbone(c.backbone, target, a.expert)["mAP"]
        for c, a in zip(ckpts, adaptations)
    ]

    model = build_merged_model(ckpts, [a.expert for a in adaptations])
    map_lora_avg = evaluate_merged(model, target)["mAP"]
    train_gate(model, target.train, train_cfg, lora_dropout=lora_cfg.dropout, log=log)
    map_gated = evaluate_merged(model, target)["mAP"]

    return TrendResult(
        seed=seed,
        map_blend_pretrain=map_blend,
        map_avg_pretrain=map_avg,
        map_source_only=map_source_only,
        map_adapted=map_adapted,
        map_lora_avg=map_lora_avg,
        map_gated=map_gated,
    )
