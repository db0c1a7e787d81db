"""Named model configurations (S/M/L/X x det/pose/insseg) and their
reference budgets, loss weights and recorded training settings."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from .decoder import DecoderConfig
from .distill import BASE_LR, DistillConfig, teacher_for
from .ecvit import BackboneConfig
from .encoder import EncoderConfig
from .losses import LossWeights
from .model import ModelConfig
from .tensorkit import ConfigError

NAMES = ("S", "M", "L", "X")
TASKS = {"det": "detect", "pose": "pose", "insseg": "insseg"}

# name -> (backbone variant, encoder hidden, encoder ffn, decoder ffn)
STRUCTURE = {
    "S": ("T", 192, 512, 512),
    "M": ("T+", 256, 512, 1024),
    "L": ("S", 256, 1024, 1024),
    "X": ("S+", 256, 2048, 2048),
}
DECODER_LAYERS = 4
QUERIES = 300
INPUT_SIZE = 640
COCO_CLASSES = 80
COCO_KEYPOINTS = 17

# reference (params in millions, GFLOPs at 640x640)
TARGETS = {
    "det": {"S": (10.0, 26.0), "M": (18.0, 53.0), "L": (31.0, 101.0), "X": (49.0, 151.0)},
    "pose": {"S": (9.9, 30.4), "M": (19.8, 62.8), "L": (34.3, 111.7), "X": (50.6, 172.2)},
    "insseg": {"S": (10.3, 33.1), "M": (20.1, 64.2), "L": (33.6, 110.8), "X": (49.9, 168.1)},
}
# ablation measurement of the M detector with the conv stem
ALT_TARGETS = {("det", "M"): (19.2, 53.1)}

# recorded training settings; carried for completeness, not used by any code path
_DET_META = {
    "S": {"backbone_lr": 2.5e-5, "weight_decay": 1e-4, "epochs": [72, 2], "prob_mosaic": 0.75, "epochs_mosaic": 36, "prob_mixup": 0.75, "epochs_mixup": 36},
    "M": {"backbone_lr": 2.5e-5, "weight_decay": 1e-4, "epochs": [60, 2], "prob_mosaic": 0.75, "epochs_mosaic": 30, "prob_mixup": 0.75, "epochs_mixup": 30},
    "L": {"backbone_lr": 5e-6, "weight_decay": 1.25e-4, "epochs": [48, 2], "prob_mosaic": 1.0, "epochs_mosaic": 24, "prob_mixup": 1.0, "epochs_mixup": 24},
    "X": {"backbone_lr": 2.5e-6, "weight_decay": 1.25e-4, "epochs": [48, 2], "prob_mosaic": 1.0, "epochs_mosaic": 24, "prob_mixup": 1.0, "epochs_mixup": 24},
}
_POSE_META = {
    "S": {"backbone_lr": 2.5e-5, "weight_decay": 1e-4, "epochs": [90, 2], "epochs_aug": 45},
    "M": {"backbone_lr": 2.5e-5, "weight_decay": 1e-4, "epochs": [90, 2], "epochs_aug": 45},
    "L": {"backbone_lr": 2.5e-6, "weight_decay": 1.25e-4, "epochs": [72, 2], "epochs_aug": 48},
    "X": {"backbone_lr": 2.5e-6, "weight_decay": 1.25e-4, "epochs": [72, 2], "epochs_aug": 48},
}


def _metadata(name: str, task: str) -> dict:
    if task == "pose":
        m = dict(_POSE_META[name])
        m.update(optimizer="AdamW", base_lr=5e-4, batch_size=64, prob_mosaic=0.5, prob_mixup=0.5, prob_copypaste=0.5)
        return m
    m = dict(_DET_META[name])
    m.update(optimizer="AdamW", base_lr=5e-4, lr_decay=0.5, batch_size=32)
    return m


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    task: str  # det | pose | insseg
    config: ModelConfig
    weights: LossWeights
    distill: DistillConfig
    targets: tuple  # (params in millions, GFLOPs)
    metadata: dict = field(default_factory=dict, compare=False)

    @property
    def label(self) -> str:
        return f"{self.name}-{self.task}"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "task": self.task,
            "config": asdict(self.config),
            "weights": asdict(self.weights),
            "distill": asdict(self.distill),
            "targets": {"params_m": self.targets[0], "gflops": self.targets[1]},
            "metadata": self.metadata,
        }


def _check(name: str, task: str) -> None:
    if name not in NAMES:
        raise ConfigError(f"unknown model name {name!r}; valid options: {', '.join(NAMES)}")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; valid options: {', '.join(TASKS)}")


def model_config(name: str, task: str = "det", **backbone_overrides) -> ModelConfig:
    _check(name, task)
    variant, hidden, enc_ffn, dec_ffn = STRUCTURE[name]
    inner = TASKS[task]
    return ModelConfig(
        name=name,
        task=inner,
        backbone=BackboneConfig.from_variant(variant, **backbone_overrides),
        encoder=EncoderConfig(hidden_dim=hidden, ffn_dim=enc_ffn),
        decoder=DecoderConfig(
            hidden_dim=hidden,
            layers=DECODER_LAYERS,
            queries=QUERIES,
            ffn_dim=dec_ffn,
            task=inner,
            num_classes=1 if task == "pose" else COCO_CLASSES,
            keypoints=COCO_KEYPOINTS,
        ),
    )


def entry(name: str, task: str = "det", **backbone_overrides) -> RegistryEntry:
    cfg = model_config(name, task, **backbone_overrides)
    teacher = teacher_for(name)
    return RegistryEntry(
        name=name,
        task=task,
        config=cfg,
        weights=LossWeights.for_task(TASKS[task]),
        distill=DistillConfig(teacher=teacher, base_lr=BASE_LR[cfg.backbone.variant]),
        targets=TARGETS[task][name],
        metadata=_metadata(name, task),
    )


def all_entries() -> list[RegistryEntry]:
    return [entry(n, t) for t in TASKS for n in NAMES]


# ---------------------------------------------------------------------------
# config files


def _sub(cls, data: Optional[dict], base):
    if not data:
        return base
    unknown = set(data) - set(asdict(base))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return replace(base, **data)


def entry_from_dict(data: dict[str, Any]) -> RegistryEntry:
    """Registry entry from a JSON mapping; missing sections fall back to the
    named registry entry."""
    base = entry(data.get("name", "S"), data.get("task", "det"))
    cfg_data = dict(data.get("config") or {})
    try:
        cfg = replace(
            base.config,
            backbone=_sub(BackboneConfig, cfg_data.pop("backbone", None), base.config.backbone),
            encoder=_sub(EncoderConfig, cfg_data.pop("encoder", None), base.config.encoder),
            decoder=_sub(DecoderConfig, cfg_data.pop("decoder", None), base.config.decoder),
            **{k: tuple(v) if isinstance(v, list) else v for k, v in cfg_data.items() if k not in ("name", "task")},
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return replace(
        base,
        config=cfg,
        weights=_sub(LossWeights, data.get("weights"), base.weights),
        distill=_sub(DistillConfig, data.get("distill"), base.distill),
    )


def load_entry(path: str | Path) -> RegistryEntry:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return entry_from_dict(data)
