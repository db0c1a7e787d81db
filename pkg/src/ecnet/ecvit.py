"""Compact ViT backbone with a convolutional stem and register tokens."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorkit as tk
from .params import Init
from .tensorkit import ConfigError, DimensionError, Tensor

# (embed_dim, heads, ffn_ratio)
VARIANTS = {
    "T": (192, 3, 4),
    "T+": (256, 4, 4),
    "S": (384, 6, 4),
    "S+": (384, 6, 6),
}
POS_GRID = 40
PATCH = 16


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "T"
    embed_dim: int = 192
    heads: int = 3
    ffn_ratio: int = 4
    depth: int = 12
    register_count: int = 1
    stem_dilation: int = 1
    patch_embed: str = "conv_stem"

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.register_count < 0:
            raise ConfigError("register_count must be >= 0")
        if self.patch_embed not in ("conv_stem", "vanilla16"):
            raise ConfigError(f"unknown patch_embed {self.patch_embed!r}")
        if self.patch_embed == "conv_stem":
            if self.stem_dilation not in (1, 2, 3):
                raise ConfigError("stem_dilation must be 1, 2 or 3")
            if self.embed_dim % 8:
                raise ConfigError("conv stem needs embed_dim divisible by 8")

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> "BackboneConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        d, h, r = VARIANTS[variant]
        return cls(variant=variant, embed_dim=d, heads=h, ffn_ratio=r, **overrides)

    @property
    def stem_channels(self) -> list[int]:
        d = self.embed_dim
        return [d // 8, d // 4, d // 2, d]


@dataclass
class BackboneOutput:
    block_tokens: list[Tensor]
    grid_h: int
    grid_w: int
    register_count: int = 0
    stem_tokens: Tensor | None = field(default=None, repr=False)

    def spatial(self, index: int) -> Tensor:
        """Tokens of block ``index`` with the leading register rows removed."""
        return self.block_tokens[index][self.register_count :]


# ---------------------------------------------------------------------------
# construction


def build_conv_stem(config: BackboneConfig, init: Init) -> dict:
    chans = [3] + config.stem_channels
    return {"convs": [init.conv_norm(a, b, 3) for a, b in zip(chans[:-1], chans[1:])]}


def build_vanilla_embed(config: BackboneConfig, init: Init) -> dict:
    return {"proj": init.conv(3, config.embed_dim, PATCH)}


def build_block(dim: int, ffn_ratio: int, init: Init) -> dict:
    hidden = dim * ffn_ratio
    return {
        "norm1": init.layer_norm(dim),
        "attn": init.attention(dim),
        "norm2": init.layer_norm(dim),
        "mlp": init.mlp([dim, hidden, dim]),
    }


def build_backbone(config: BackboneConfig, init: Init) -> dict:
    d = config.embed_dim
    stem = build_conv_stem(config, init) if config.patch_embed == "conv_stem" else build_vanilla_embed(config, init)
    params = {
        "stem": stem,
        "pos_embed": init.normal((d, POS_GRID, POS_GRID), 0.02),
        "blocks": [build_block(d, config.ffn_ratio, init) for _ in range(config.depth)],
    }
    if config.register_count:
        params["registers"] = init.normal((config.register_count, d), 0.02)
        params["register_pos"] = init.normal((config.register_count, d), 0.02)
    return params


# ---------------------------------------------------------------------------
# forward


def stem_forward(image: Tensor, stem: dict, config: BackboneConfig) -> Tensor:
    if config.patch_embed == "vanilla16":
        return tk.conv2d(image, stem["proj"]["weight"], stem["proj"]["bias"], stride=PATCH)
    x = image
    last = len(stem["convs"]) - 1
    for i, conv in enumerate(stem["convs"]):
        d = config.stem_dilation if i == last else 1
        x = tk.conv2d(x, conv["weight"], stride=2, padding=d, dilation=d)
        x = tk.silu(tk.channel_affine(x, conv["norm"]["weight"], conv["norm"]["bias"]))
    return x


def block_forward(x: Tensor, p: dict, heads: int) -> Tensor:
    h = tk.layer_norm(x, p["norm1"]["weight"], p["norm1"]["bias"])
    x = x + tk.mhsa(h, p["attn"], heads)
    h = tk.layer_norm(x, p["norm2"]["weight"], p["norm2"]["bias"])
    fc1, fc2 = p["mlp"]
    h = tk.linear(tk.gelu(tk.linear(h, fc1["weight"], fc1["bias"])), fc2["weight"], fc2["bias"])
    return x + h


def positional_embedding(pos_embed: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """Learned [D, 40, 40] table resized to the token grid, as [gh*gw, D]."""
    d = pos_embed.shape[0]
    grid = tk.bilinear_resize(pos_embed, grid_h, grid_w)
    return grid.reshape(d, grid_h * grid_w).T


def backbone_forward(image: Tensor, params: dict, config: BackboneConfig) -> BackboneOutput:
    image = np.asarray(image, dtype=tk.DTYPE)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected image [3,H,W], got {image.shape}")
    _, h, w = image.shape
    if h % PATCH or w % PATCH:
        raise DimensionError(f"image size {h}x{w} not divisible by {PATCH}")
    with tk.scope("stem"):
        feat = stem_forward(image, params["stem"], config)
    d, gh, gw = feat.shape
    tokens = feat.reshape(d, gh * gw).T + positional_embedding(params["pos_embed"], gh, gw)
    stem_tokens = tokens
    r = config.register_count
    if r:
        regs = params["registers"] + params["register_pos"]
        tokens = np.concatenate([regs, tokens], axis=0)
    outputs = []
    x = tokens
    with tk.scope("blocks"):
        for blk in params["blocks"]:
            x = block_forward(x, blk, config.heads)
            outputs.append(x)
    return BackboneOutput(outputs, gh, gw, r, stem_tokens)
