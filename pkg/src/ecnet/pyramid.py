"""Three-level feature pyramid generated from the last backbone blocks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorkit as tk
from .ecvit import BackboneOutput
from .params import Init
from .tensorkit import ConfigError, Tensor

STRIDES = (8, 16, 32)


@dataclass
class FeaturePyramid:
    f8: Tensor
    f16: Tensor
    f32: Tensor
    strides: tuple = STRIDES

    def levels(self) -> list[Tensor]:
        return [self.f8, self.f16, self.f32]


def resolve_range(layers, depth: int) -> list[int]:
    """Normalise a layer selection; negative indices count from the end."""
    idx = [i + depth if i < 0 else i for i in layers]
    if not idx:
        raise ConfigError("fusion range is empty")
    if any(i < 0 or i >= depth for i in idx):
        raise ConfigError(f"fusion range {list(layers)} outside [0, {depth})")
    return idx


def fused_channels(embed_dim: int, strategy: str, n_layers: int) -> int:
    if strategy == "mean":
        return embed_dim
    if strategy == "concat":
        return embed_dim * n_layers
    raise ConfigError(f"unknown fusion strategy {strategy!r}")


def fuse_layers(blocks: BackboneOutput, strategy: str = "mean", layers=(-2, -1)) -> Tensor:
    """Fuse selected block outputs into a [C', gh, gw] map at stride 16."""
    depth = len(blocks.block_tokens)
    idx = resolve_range(layers, depth)
    feats = [blocks.spatial(i) for i in idx]
    if strategy == "mean":
        fused = feats[0] if len(feats) == 1 else np.mean(np.stack(feats), axis=0)
    elif strategy == "concat":
        fused = np.concatenate(feats, axis=1)
    else:
        raise ConfigError(f"unknown fusion strategy {strategy!r}")
    n, c = fused.shape
    assert n == blocks.grid_h * blocks.grid_w
    return fused.T.reshape(c, blocks.grid_h, blocks.grid_w).astype(tk.DTYPE, copy=False)


def build_pyramid(in_channels: int, out_channels: int, init: Init) -> dict:
    return {f"proj{s}": init.conv(in_channels, out_channels, 1) for s in STRIDES}


def make_pyramid(fused: Tensor, params: dict) -> FeaturePyramid:
    _, gh, gw = fused.shape
    sizes = {8: (gh * 2, gw * 2), 16: (gh, gw), 32: (gh // 2, gw // 2)}
    out = {}
    for s in STRIDES:
        resized = tk.bilinear_resize(fused, *sizes[s])
        proj = params[f"proj{s}"]
        out[s] = tk.conv2d(resized, proj["weight"], proj["bias"])
    return FeaturePyramid(out[8], out[16], out[32])
