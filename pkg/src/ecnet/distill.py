"""Feature-alignment distillation at desk scale.

A frozen student backbone is aligned to a frozen teacher through a linear
adapter trained with LARS under a warmup + cosine learning-rate schedule.
Student and teacher features are computed once up front since neither
network receives updates.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ecvit import BackboneConfig, backbone_forward, build_backbone
from .losses import distill_loss
from .params import Init
from .tensorkit import ConfigError, DimensionError

log = logging.getLogger(__name__)

REFERENCE_BATCH = 1536
LARS_MOMENTUM = 0.9
LARS_EPS = 1e-9
TEACHER_DIMS = {"mockS": 384, "mockB": 768}
TEACHERS = ("mockS", "mockB", "linear_probe")
# base learning rate per student width
BASE_LR = {"T": 4.0, "T+": 4.0, "S": 9.0, "S+": 9.0}


@dataclass(frozen=True)
class DistillConfig:
    teacher: str = "mockB"
    base_lr: float = 4.0
    batch: int = 128
    epochs: int = 50
    warmup_epochs: int = 5
    final_lr_fraction: float = 1e-3
    weight_decay: float = 1e-6
    aligned_teacher_layers: int = 2
    probe_dim: int = 384

    def __post_init__(self):
        if self.teacher not in TEACHERS:
            raise ConfigError(f"unknown teacher {self.teacher!r}; expected one of {list(TEACHERS)}")
        if not 1 <= self.aligned_teacher_layers <= 4:
            raise ConfigError("aligned_teacher_layers must be in 1..4")
        if self.batch < 1 or self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("need batch >= 1, epochs >= 1 and 0 <= warmup_epochs <= epochs")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("base_lr must be positive and weight_decay non-negative")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * math.sqrt(self.batch / REFERENCE_BATCH)

    @property
    def teacher_dim(self) -> int:
        return self.probe_dim if self.teacher == "linear_probe" else TEACHER_DIMS[self.teacher]


def teacher_for(model_name: str) -> str:
    """Mock teacher paired with a detector scale: the smallest uses the small teacher."""
    return "mockS" if model_name == "S" else "mockB"


def lr_at(step: int, total_steps: int, config: DistillConfig, warmup_steps: Optional[int] = None) -> float:
    """Linear warmup to the peak, then cosine decay to ``final_lr_fraction * peak``.

    Without ``warmup_steps`` the warmup length is the epoch fraction
    ``warmup_epochs / epochs`` of ``total_steps``.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak = config.peak_lr
    if warmup_steps is None:
        warmup_steps = round(total_steps * config.warmup_epochs / config.epochs)
    if step < warmup_steps:
        return peak * step / warmup_steps
    span = total_steps - warmup_steps
    progress = 1.0 if span == 0 else (step - warmup_steps) / span
    floor = config.final_lr_fraction
    return peak * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


# ---------------------------------------------------------------------------
# LARS


def trust_ratio(param, grad, weight_decay: float = 0.0, eps: float = LARS_EPS) -> float:
    p = np.asarray(param, dtype=np.float64)
    pn = float(np.linalg.norm(p))
    if pn == 0.0:
        return 1.0
    d = np.asarray(grad, dtype=np.float64) + weight_decay * p
    return pn / (float(np.linalg.norm(d)) + eps)


def lars_step(param, grad, lr: float, weight_decay: float = 0.0, state: Optional[np.ndarray] = None,
              momentum: float = LARS_MOMENTUM, eps: float = LARS_EPS):
    """One LARS update. Returns ``(new_param, momentum_buffer)``.

    The buffer accumulates trust-scaled gradients and the learning rate is
    applied on the way out, matching common SGD-momentum implementations.
    """
    p = np.asarray(param, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"param {p.shape} vs grad {g.shape}")
    d = g + weight_decay * p
    buf = np.zeros_like(p) if state is None else state
    buf = momentum * buf + trust_ratio(p, g, weight_decay, eps) * d
    return p - lr * buf, buf


# ---------------------------------------------------------------------------
# teachers and features


def mock_teacher_config(teacher: str) -> BackboneConfig:
    dim = TEACHER_DIMS[teacher]
    return BackboneConfig(variant=teacher, embed_dim=dim, heads=dim // 64, ffn_ratio=4, depth=12,
                          register_count=4, patch_embed="vanilla16")


@dataclass
class Teacher:
    kind: str
    dim: int
    layers: int
    params: Optional[dict] = None
    config: Optional[BackboneConfig] = None
    probe: Optional[dict] = None  # linear map from student features


def build_teacher(config: DistillConfig, student_dim: int, seed: int = 0) -> Teacher:
    rng = np.random.default_rng(seed + 1)
    if config.teacher == "linear_probe":
        w = rng.standard_normal((config.probe_dim, student_dim)) / math.sqrt(student_dim)
        b = 0.1 * rng.standard_normal(config.probe_dim)
        return Teacher("linear_probe", config.probe_dim, config.aligned_teacher_layers, probe={"weight": w, "bias": b})
    tcfg = mock_teacher_config(config.teacher)
    params = build_backbone(tcfg, Init(rng))
    return Teacher(config.teacher, tcfg.embed_dim, config.aligned_teacher_layers, params, tcfg)


def student_features(images, params: dict, config: BackboneConfig) -> np.ndarray:
    """Final-block spatial tokens for each image, [num_images, tokens, D]."""
    return np.stack([backbone_forward(im, params, config).spatial(-1) for im in images]).astype(np.float64)


def teacher_features(teacher: Teacher, images, student_feats: np.ndarray) -> np.ndarray:
    """Aligned teacher layers, [layers, num_images, tokens, Dt]."""
    if teacher.kind == "linear_probe":
        y = student_feats @ teacher.probe["weight"].T + teacher.probe["bias"]
        return np.stack([y] * teacher.layers)
    out = []
    for im in images:
        res = backbone_forward(im, teacher.params, teacher.config)
        out.append([res.spatial(-1 - i) for i in reversed(range(teacher.layers))])
    return np.asarray(out, dtype=np.float64).transpose(1, 0, 2, 3)


def synthetic_images(count: int, size: int = 64, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((count, 3, size, size), dtype=np.float32)


# ---------------------------------------------------------------------------
# training


@dataclass
class DistillResult:
    epoch_losses: list[float]
    lrs: list[float] = field(default_factory=list)
    adapter: dict = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]

    def is_non_increasing(self, tolerance: float = 0.05) -> bool:
        return all(b <= a * (1.0 + tolerance) for a, b in zip(self.epoch_losses, self.epoch_losses[1:]))


def whitening(feats: np.ndarray, rtol: float = 1e-10):
    """Mean and matrix ``P`` such that ``(x - mean) @ P`` has identity covariance
    on the span of the features."""
    mean = feats.mean(0)
    _, s, vt = np.linalg.svd(feats - mean, full_matrices=False)
    keep = s > rtol * s[0]
    return mean, vt[keep].T / s[keep] * math.sqrt(len(feats))


def train_adapter(student: np.ndarray, teacher: np.ndarray, config: DistillConfig, seed: int = 0,
                  adapter_init: str = "random", precondition: str = "whiten") -> DistillResult:
    """Fit the linear adapter on precomputed features.

    ``student`` is [num_images, tokens, Ds]; ``teacher`` is
    [layers, num_images, tokens, Dt]. The per-step loss is the distillation
    loss averaged over the images of the batch.

    With ``precondition="whiten"`` the adapter is parameterized as
    ``A @ P.T`` over whitened features. That is the same family of affine
    maps, but frozen random-ViT features are badly conditioned and plain
    first-order training stalls on them. The returned adapter is folded
    back to act on raw student features.
    """
    n_img, n_tok, ds = student.shape
    dt = teacher.shape[-1]
    if teacher.shape[1:3] != student.shape[:2]:
        raise DimensionError(f"teacher features {teacher.shape} do not match student {student.shape}")
    if precondition not in ("whiten", "none"):
        raise ConfigError(f"unknown precondition {precondition!r}")
    flat = student.reshape(-1, ds)
    if precondition == "whiten":
        mean, proj = whitening(flat)
    else:
        mean, proj = np.zeros(ds), np.eye(ds)
    feats = ((flat - mean) @ proj).reshape(n_img, n_tok, -1)
    dz = feats.shape[-1]

    rng = np.random.default_rng(seed)
    if adapter_init == "zero":
        adapter = {"weight": np.zeros((dt, dz)), "bias": np.zeros(dt)}
    else:
        adapter = {"weight": rng.standard_normal((dt, dz)) / math.sqrt(dz), "bias": np.zeros(dt)}
    state = {k: None for k in adapter}
    steps_per_epoch = max(1, math.ceil(n_img / config.batch))
    total = steps_per_epoch * config.epochs
    warm = steps_per_epoch * config.warmup_epochs
    result = DistillResult([], [])
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n_img)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * config.batch:(s + 1) * config.batch]
            b = len(idx)
            x = feats[idx].reshape(-1, dz)
            ts = [t[idx].reshape(-1, dt) for t in teacher]
            loss, grads = distill_loss(x, ts, adapter)
            losses.append(loss / b)
            lr = lr_at(step, total, config, warm)
            for k in adapter:
                adapter[k], state[k] = lars_step(adapter[k], grads[k] / b, lr, config.weight_decay, state[k])
            result.lrs.append(lr)
            step += 1
        result.epoch_losses.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6g", epoch, result.epoch_losses[-1])
    weight = adapter["weight"] @ proj.T
    result.adapter = {"weight": weight, "bias": adapter["bias"] - weight @ mean}
    return result


def run_distillation(student_params: dict, student_config: BackboneConfig, images, config: DistillConfig,
                     seed: int = 0, teacher: Optional[Teacher] = None, adapter_init: str = "random",
                     precondition: str = "whiten") -> DistillResult:
    """Precompute frozen features, then train the adapter. Returns per-epoch mean losses."""
    feats = student_features(images, student_params, student_config)
    teacher = teacher or build_teacher(config, student_config.embed_dim, seed)
    if teacher.dim != config.teacher_dim:
        raise DimensionError(f"teacher dim {teacher.dim} does not match adapter output {config.teacher_dim}")
    tfeats = teacher_features(teacher, images, feats)
    return train_adapter(feats, tfeats, config, seed, adapter_init, precondition)
