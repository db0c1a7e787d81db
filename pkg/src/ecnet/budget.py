"""Parameter counts and MAC estimates.

Two independent routes are provided: closed-form formulas evaluated from a
config alone (fast at any input size), and measurement on a built model
(manifest walk for parameters, a counted forward pass for MACs). Tests hold
the two routes equal.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

from . import tensorkit as tk
from .ecvit import PATCH, POS_GRID, BackboneConfig
from .encoder import EncoderConfig
from .decoder import DecoderConfig
from .model import Model, ModelConfig, build_model, forward, random_image
from .params import iter_leaves

MODULES = ("backbone", "pyramid", "encoder", "decoder")


@dataclass
class BudgetReport:
    params_total: int
    params_by_module: dict
    macs_total: int
    macs_by_module: dict
    input_size: tuple
    name: str = ""
    targets: dict = field(default_factory=dict)

    @property
    def flops_1x(self) -> int:
        return self.macs_total

    @property
    def flops_2x(self) -> int:
        return 2 * self.macs_total

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["flops_1x"] = self.flops_1x
        d["flops_2x"] = self.flops_2x
        return d

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def table(self) -> str:
        rows = [("module", "params", "GMACs")]
        for m in self.params_by_module:
            rows.append((m, f"{self.params_by_module[m]:,}", f"{self.macs_by_module.get(m, 0) / 1e9:.3f}"))
        rows.append(("total", f"{self.params_total:,}", f"{self.macs_total / 1e9:.3f}"))
        rows.append(("GFLOPs (1x / 2x)", "", f"{self.flops_1x / 1e9:.2f} / {self.flops_2x / 1e9:.2f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [f"{r[0]:<{widths[0]}}  {r[1]:>{widths[1]}}  {r[2]:>{widths[2]}}" for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# closed-form parameters


def _lin(a: int, b: int) -> int:
    return a * b + b


def _conv_norm(a: int, b: int, k: int) -> int:
    return a * b * k * k + 2 * b


def block_params(dim: int, ffn_ratio: int) -> int:
    """One pre-norm transformer block: attention, MLP and two layer norms."""
    return 4 * _lin(dim, dim) + _lin(dim, dim * ffn_ratio) + _lin(dim * ffn_ratio, dim) + 4 * dim


def backbone_params(cfg: BackboneConfig) -> int:
    d = cfg.embed_dim
    if cfg.patch_embed == "conv_stem":
        chans = [3] + cfg.stem_channels
        stem = sum(_conv_norm(a, b, 3) for a, b in zip(chans[:-1], chans[1:]))
    else:
        stem = 3 * PATCH * PATCH * d + d
    return stem + d * POS_GRID * POS_GRID + 2 * cfg.register_count * d + cfg.depth * block_params(d, cfg.ffn_ratio)


def pyramid_params(in_channels: int, hidden: int) -> int:
    return 3 * (in_channels * hidden + hidden)


def _fuse_params(c: int, h: int) -> int:
    return _conv_norm(2 * c, c, 1) + _conv_norm(c, h, 3) + _conv_norm(h, c, 3)


def encoder_params(cfg: EncoderConfig) -> int:
    c, f, h = cfg.hidden_dim, cfg.ffn_dim, cfg.fuse_hidden
    aifi = 4 * _lin(c, c) + 4 * c + _lin(c, f) + _lin(f, c)
    return aifi + 4 * _fuse_params(c, h) + 2 * _conv_norm(c, c, 3)


def decoder_params(cfg: DecoderConfig) -> int:
    c, n, k = cfg.hidden_dim, cfg.queries, cfg.keypoints
    hlp = cfg.heads * cfg.levels * cfg.points
    cross = _lin(c, 2 * hlp) + _lin(c, hlp) + 2 * _lin(c, c)
    layer = (4 * _lin(c, c) + 6 * c + cross + _lin(c, cfg.ffn_dim) + _lin(cfg.ffn_dim, c)
             + _lin(c, cfg.num_classes) + 2 * _lin(c, c) + _lin(c, 4))
    total = n * c + n * 4
    if cfg.task == "pose":
        layer += _lin(c, c) + _lin(c, 2) + _lin(c, 1)
        total += k * c + n * k * 2
    total += cfg.layers * layer
    if cfg.task == "insseg":
        e = cfg.embed_dim
        total += 9 * c + c + 2 * (_lin(c, e) + _lin(e, e))
    return total


def closed_form_params(config: ModelConfig) -> dict:
    return {
        "backbone": backbone_params(config.backbone),
        "pyramid": pyramid_params(config.fused_dim, config.encoder.hidden_dim),
        "encoder": encoder_params(config.encoder),
        "decoder": decoder_params(config.decoder),
    }


# ---------------------------------------------------------------------------
# closed-form MACs


def backbone_macs(cfg: BackboneConfig, h: int, w: int) -> int:
    d = cfg.embed_dim
    gh, gw = h // PATCH, w // PATCH
    if cfg.patch_embed == "conv_stem":
        chans = [3] + cfg.stem_channels
        stem, sh, sw = 0, h, w
        for a, b in zip(chans[:-1], chans[1:]):
            sh, sw = (sh + 1) // 2, (sw + 1) // 2
            stem += a * b * 9 * sh * sw
    else:
        stem = 3 * PATCH * PATCH * d * gh * gw
    t = gh * gw + cfg.register_count
    hidden = d * cfg.ffn_ratio
    block = 4 * t * d * d + 2 * t * t * d + 2 * t * d * hidden
    return stem + cfg.depth * block


def _level_sizes(h: int, w: int) -> dict:
    return {s: (h // s) * (w // s) for s in (8, 16, 32)}


def pyramid_macs(in_channels: int, hidden: int, h: int, w: int) -> int:
    return sum(_level_sizes(h, w).values()) * in_channels * hidden


def encoder_macs(cfg: EncoderConfig, h: int, w: int) -> int:
    c, f, hd = cfg.hidden_dim, cfg.ffn_dim, cfg.fuse_hidden
    n = _level_sizes(h, w)
    aifi = 4 * n[32] * c * c + 2 * n[32] ** 2 * c + 2 * n[32] * c * f

    def fuse(size):
        return size * (2 * c * c + 9 * c * hd + 9 * hd * c)

    ccff = fuse(n[16]) + fuse(n[8]) + fuse(n[16]) + fuse(n[32]) + 9 * c * c * (n[16] + n[32])
    return aifi + ccff


def decoder_layer_macs(cfg: DecoderConfig, h: int, w: int) -> int:
    c, n = cfg.hidden_dim, cfg.queries
    hlp = cfg.heads * cfg.levels * cfg.points
    pixels = sum(_level_sizes(h, w).values())
    t = cfg.keypoints + 1 if cfg.task == "pose" else 1
    rows = n * t
    if cfg.task == "pose":
        self_attn = 4 * rows * c * c + 2 * n * t * (t + n) * c
    else:
        self_attn = 4 * n * c * c + 2 * n * n * c
    cross = rows * c * 3 * hlp + pixels * c * c + rows * cfg.levels * cfg.points * c + rows * c * c
    ffn = 2 * n * c * cfg.ffn_dim
    heads = n * c * cfg.num_classes + n * (2 * c * c + 4 * c)
    if cfg.task == "pose":
        k = cfg.keypoints
        heads += n * k * (c * c + 2 * c) + n * k * c
    return self_attn + cross + ffn + heads


def mask_head_macs(cfg: DecoderConfig, h: int, w: int) -> int:
    c, e, n = cfg.hidden_dim, cfg.embed_dim, cfg.queries
    pix = 4 * _level_sizes(h, w)[8]
    return 9 * c * pix + pix * (c * e + e * e) + n * (c * e + e * e) + n * e * pix


def decoder_macs(cfg: DecoderConfig, h: int, w: int, aux_masks: bool = False) -> int:
    total = cfg.layers * decoder_layer_macs(cfg, h, w)
    if cfg.task == "insseg":
        total += (cfg.layers if aux_masks else 1) * mask_head_macs(cfg, h, w)
    return total


def closed_form_macs(config: ModelConfig, input_size=(640, 640)) -> dict:
    h, w = _size(input_size)
    return {
        "backbone": backbone_macs(config.backbone, h, w),
        "pyramid": pyramid_macs(config.fused_dim, config.encoder.hidden_dim, h, w),
        "encoder": encoder_macs(config.encoder, h, w),
        "decoder": decoder_macs(config.decoder, h, w),
    }


# ---------------------------------------------------------------------------
# public entry points


def _size(input_size) -> tuple:
    h, w = (input_size, input_size) if isinstance(input_size, int) else tuple(input_size)
    if h % 32 or w % 32:
        raise tk.DimensionError(f"input size {h}x{w} must be divisible by 32")
    return h, w


def _config(model: Union[Model, ModelConfig]) -> ModelConfig:
    return model.config if isinstance(model, Model) else model


def count_params(model: Union[Model, ModelConfig]) -> dict:
    """Exact per-module parameter counts.

    A built :class:`Model` is measured by walking its parameter tree; a bare
    config is evaluated in closed form.
    """
    if isinstance(model, Model):
        out = {m: 0 for m in MODULES}
        for name, arr in iter_leaves(model.params):
            out[name.split(".")[0]] += int(arr.size)
        return out
    return closed_form_params(model)


def estimate_flops(model: Union[Model, ModelConfig], input_size=(640, 640)) -> dict:
    """Per-module MACs in closed form at ``input_size``."""
    return closed_form_macs(_config(model), input_size)


def counted_macs(model: Model, input_size=(64, 64), seed: int = 0) -> dict:
    """Per-module MACs measured by running a forward pass."""
    h, w = _size(input_size)
    with tk.count_macs() as counter:
        forward(model, random_image(seed, (h, w)))
    grouped = counter.grouped(1)
    return {m: grouped.get(m, 0) for m in MODULES}


def budget(model: Union[Model, ModelConfig], input_size=(640, 640), name: str = "", targets=None) -> BudgetReport:
    params = count_params(model)
    macs = estimate_flops(model, input_size)
    return BudgetReport(sum(params.values()), params, sum(macs.values()), macs, _size(input_size), name,
                        dict(targets or {}))


def built_budget(config: ModelConfig, input_size=(640, 640), seed: int = 0) -> BudgetReport:
    return budget(build_model(config, seed), input_size)
