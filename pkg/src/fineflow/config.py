"""Run configuration: a strict JSON schema with per-module defaults.

Unknown keys are rejected anywhere in the document (typo safety). The seed
resolution order everywhere is: command-line flag, then the FF_SEED
environment variable, then the config file, then the default 1000.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .augment import AugmentConfig
from .errors import ConfigError
from .model import BackboneConfig, HeadConfig, PipelineConfig, preset_backbone
from .train import TrainConfig

DEFAULT_SEED = 1000


def resolve_seed(flag_value: int | None, config_value: int | None = None) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get("FF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"FF_SEED must be an integer, got {env!r}") from None
    if config_value is not None:
        return config_value
    return DEFAULT_SEED


@dataclass
class DataSection:
    root: str | None = None
    source_root: str | None = None
    target_root: str | None = None
    source_channel_order: str = "rgb"
    image_size: int = 256


@dataclass
class RunConfig:
    data: DataSection
    backbone: BackboneConfig
    train: TrainConfig
    pretrain: TrainConfig
    output: str
    head_units: int = 128
    head_pooling: str = "avg"
    head_dropout: float = 0.2

    def pipeline(self, effective_side: int | None = None) -> PipelineConfig:
        # Compound scaling can move the model's input side away from
        # data.image_size; the preprocessing chain follows the model.
        return PipelineConfig(
            image_size=effective_side if effective_side is not None else self.data.image_size,
            source_channel_order=self.data.source_channel_order,
        )

    def head_for(self, num_classes: int) -> HeadConfig:
        return HeadConfig(num_classes=num_classes, pooling=self.head_pooling,
                          dense_units=self.head_units, dropout_rate=self.head_dropout)


def _take(section: dict, name: str, allowed: dict):
    """Pop known keys with defaults; reject anything unexpected."""
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r} section: {sorted(unknown)}")
    return {k: section.get(k, v) for k, v in allowed.items()}


def _augment_from(section: dict) -> AugmentConfig | None:
    vals = _take(section, "augment", {
        "enable": True,
        "rotation_deg": 15.0,
        "zoom": [0.9, 1.1],
        "shear_deg": 10.0,
        "flip_prob": 0.5,
        "mode": "compose",
    })
    if not vals["enable"]:
        return None
    zoom = vals["zoom"]
    if not (isinstance(zoom, (list, tuple)) and len(zoom) == 2):
        raise ConfigError("augment.zoom must be a [low, high] pair")
    return AugmentConfig(
        rotation_deg=float(vals["rotation_deg"]),
        zoom=(float(zoom[0]), float(zoom[1])),
        shear_deg=float(vals["shear_deg"]),
        flip_prob=float(vals["flip_prob"]),
        mode=vals["mode"],
    )


def _train_from(section: dict, name: str, augment: AugmentConfig | None,
                seed_override: int | None) -> TrainConfig:
    vals = _take(section, name, {
        "epochs": 25,
        "batch_size": 32,
        "lr": 1e-4,
        "seed": None,
        "trainable_policy": "all",
    })
    policy = vals["trainable_policy"]
    if isinstance(policy, str) and policy not in ("all", "head_only"):
        raise ConfigError(
            f"{name}.trainable_policy must be 'all', 'head_only', or an integer"
        )
    return TrainConfig(
        epochs=int(vals["epochs"]),
        batch_size=int(vals["batch_size"]),
        lr=float(vals["lr"]),
        seed=resolve_seed(seed_override, vals["seed"]),
        augment=augment,
        trainable_policy=policy,
    )


def load_run_config(path: str, seed_override: int | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    sections = _take(doc, "config", {
        "data": {}, "backbone": {}, "head": {}, "train": {},
        "pretrain": None, "augment": {}, "output": "out",
    })

    data_vals = _take(sections["data"], "data", {
        "root": None, "source_root": None, "target_root": None,
        "source_channel_order": "rgb", "image_size": 256,
    })
    data = DataSection(
        root=data_vals["root"],
        source_root=data_vals["source_root"],
        target_root=data_vals["target_root"],
        source_channel_order=data_vals["source_channel_order"],
        image_size=int(data_vals["image_size"]),
    )

    bb_vals = _take(sections["backbone"], "backbone", {
        "preset": None, "base_blocks": None, "base_channels": None,
        "phi": None, "input_side": None, "skip_connections": None,
    })
    if bb_vals["preset"] is not None:
        base = preset_backbone(bb_vals["preset"], input_side=data.image_size)
    else:
        base = BackboneConfig(input_side=data.image_size)
    backbone = BackboneConfig(
        base_blocks=int(bb_vals["base_blocks"] if bb_vals["base_blocks"] is not None
                        else base.base_blocks),
        base_channels=int(bb_vals["base_channels"] if bb_vals["base_channels"] is not None
                          else base.base_channels),
        phi=float(bb_vals["phi"] if bb_vals["phi"] is not None else base.phi),
        input_side=int(bb_vals["input_side"] if bb_vals["input_side"] is not None
                       else base.input_side),
        skip_connections=bool(bb_vals["skip_connections"]
                              if bb_vals["skip_connections"] is not None
                              else base.skip_connections),
    )
    if backbone.input_side != data.image_size:
        raise ConfigError(
            f"backbone.input_side {backbone.input_side} != data.image_size {data.image_size}"
        )

    head_vals = _take(sections["head"], "head", {
        "pooling": "avg", "dense_units": 128, "dropout_rate": 0.2,
    })

    augment = _augment_from(sections["augment"])
    train_cfg = _train_from(sections["train"], "train", augment, seed_override)
    if sections["pretrain"] is None:
        pretrain_cfg = train_cfg
    else:
        pretrain_cfg = _train_from(sections["pretrain"], "pretrain", augment, seed_override)

    return RunConfig(
        data=data,
        backbone=backbone,
        train=train_cfg,
        pretrain=pretrain_cfg,
        output=str(sections["output"]),
        head_units=int(head_vals["dense_units"]),
        head_pooling=str(head_vals["pooling"]),
        head_dropout=float(head_vals["dropout_rate"]),
    )
