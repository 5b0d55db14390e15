"""Run configuration: one JSON document drives every CLI command.

Unknown keys are rejected; missing keys take defaults and the effective
document is echoed so a run's exact settings are always visible.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .data import DomainSpecRequest
from .errors import ConfigError
from .lora import LoraConfig
from .model import BackboneConfig
from .pipeline import TrainConfig

_SPEC_TEMPLATE = {
    "role": "source",
    "n_identities": 12,
    "samples_per_identity": 4,
    "n_cameras": 2,
    "noise_sigma": 0.05,
    "seed": 0,
    "n_eval_identities": 8,
    "eval_samples_per_camera": 2,
    "shift_delta": 0.5,
    "camera_delta": 0.05,
    "target_camera_blend": 0.5,
}

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "backbone": {"n_blocks": 2, "dim": 32, "tokens": 5, "heads": 2, "token_dim": 16},
    "lora": {"r": 4, "beta": 16.0, "dropout": 0.05},
    "train": {
        "lr": 0.008,
        "momentum": 0.9,
        "epochs_source": 30,
        "epochs_adapt": 10,
        "epochs_gate": 1,
        "lambda": 1.0,
        "margin": 0.3,
        "P": 4,
        "K": 4,
    },
    "dbscan": {"min_pts": 4, "eps_percentile": 2.0},
    "data": {
        "specs": [
            {**_SPEC_TEMPLATE, "seed": 0},
            {**_SPEC_TEMPLATE, "seed": 1},
            {**_SPEC_TEMPLATE, "seed": 2},
            {**_SPEC_TEMPLATE, "role": "target", "seed": 3, "n_cameras": 3, "n_identities": 16},
        ]
    },
    "paths": {"workdir": "runs/default"},
}


def _check_type(value, default, path: str) -> None:
    if isinstance(default, bool) or isinstance(value, bool):
        if type(value) is not type(default):
            raise ConfigError(f"{path}: expected {type(default).__name__}")
        return
    if isinstance(default, (int, float)):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {type(value).__name__}")
        return
    if not isinstance(value, type(default)):
        raise ConfigError(
            f"{path}: expected {type(default).__name__}, got {type(value).__name__}"
        )


def _merge(user: dict, defaults: dict, path: str = "") -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"{path or 'document'}: expected an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown key {here!r}")
        default = defaults[key]
        if key == "specs":
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{here}: expected a non-empty list")
            out[key] = [_merge(item, _SPEC_TEMPLATE, f"{here}[{i}]") for i, item in enumerate(value)]
        elif isinstance(default, dict):
            out[key] = _merge(value, default, here)
        else:
            _check_type(value, default, here)
            out[key] = value
    return out


@dataclass
class RunConfig:
    doc: dict

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def workdir(self) -> Path:
        return Path(self.doc["paths"]["workdir"])

    def backbone_config(self) -> BackboneConfig:
        b = self.doc["backbone"]
        return BackboneConfig(
            n_blocks=b["n_blocks"],
            dim=b["dim"],
            tokens=b["tokens"],
            heads=b["heads"],
            token_dim=b["token_dim"],
        )

    def lora_config(self) -> LoraConfig:
        l = self.doc["lora"]
        return LoraConfig(rank=l["r"], scale=l["beta"], dropout=l["dropout"])

    def train_config(self) -> TrainConfig:
        t = self.doc["train"]
        d = self.doc["dbscan"]
        return TrainConfig(
            epochs_source=t["epochs_source"],
            epochs_adapt=t["epochs_adapt"],
            epochs_gate=t["epochs_gate"],
            lr=t["lr"],
            momentum=t["momentum"],
            lam=t["lambda"],
            margin=t["margin"],
            p=t["P"],
            k=t["K"],
            dbscan_min_pts=d["min_pts"],
            eps_percentile=d["eps_percentile"],
            seed=self.seed,
        )

    def spec_requests(self) -> list[DomainSpecRequest]:
        return [DomainSpecRequest(**spec) for spec in self.doc["data"]["specs"]]

    def source_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.doc["data"]["specs"]) if s["role"] == "source"]

    def target_index(self) -> int:
        targets = [i for i, s in enumerate(self.doc["data"]["specs"]) if s["role"] == "target"]
        if len(targets) != 1:
            raise ConfigError(f"exactly one target domain required, found {len(targets)}")
        return targets[0]

    def echo(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True)


def load_run_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    try:
        user = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    cfg = RunConfig(_merge(user, DEFAULT_CONFIG))
    cfg.target_index()  # validates exactly one target
    if not cfg.source_indices():
        raise ConfigError("at least one source domain is required")
    return cfg
