"""Hybrid encoder: self-attention on the stride-32 map (AIFI) followed by
convolutional top-down / bottom-up cross-scale fusion (CCFF)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorkit as tk
from .params import Init
from .pyramid import FeaturePyramid
from .tensorkit import ConfigError, DimensionError, Tensor

# (hidden_dim, ffn_dim) per model scale
ENCODER_DIMS = {"S": (192, 512), "M": (256, 512), "L": (256, 1024), "X": (256, 2048)}


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 256
    ffn_dim: int = 1024
    aifi_heads: int = 8
    fuse_expansion: float = 0.5

    def __post_init__(self):
        if self.hidden_dim % self.aifi_heads:
            raise ConfigError("hidden_dim must be divisible by aifi_heads")
        if self.hidden_dim % 4:
            raise ConfigError("hidden_dim must be divisible by 4 for 2-D sin-cos encoding")

    @property
    def fuse_hidden(self) -> int:
        return max(1, int(round(self.hidden_dim * self.fuse_expansion)))


@dataclass
class EncodedFeatures:
    e8: Tensor
    e16: Tensor
    e32: Tensor

    def levels(self) -> list[Tensor]:
        return [self.e8, self.e16, self.e32]


def sincos_2d(h: int, w: int, dim: int, temperature: float = 10000.0) -> Tensor:
    """Fixed 2-D sine-cosine encoding, [h*w, dim]."""
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    quarter = dim // 4
    omega = 1.0 / temperature ** (np.arange(quarter, dtype=np.float64) / quarter)
    ox = gx.reshape(-1, 1) * omega
    oy = gy.reshape(-1, 1) * omega
    return np.concatenate([np.sin(ox), np.cos(ox), np.sin(oy), np.cos(oy)], axis=1).astype(tk.DTYPE)


# ---------------------------------------------------------------------------
# construction


def build_fuse_block(c: int, hidden: int, init: Init) -> dict:
    return {
        "reduce": init.conv_norm(2 * c, c, 1),
        "conv1": init.conv_norm(c, hidden, 3),
        "conv2": init.conv_norm(hidden, c, 3),
    }


def build_encoder(config: EncoderConfig, init: Init) -> dict:
    c, f, h = config.hidden_dim, config.ffn_dim, config.fuse_hidden
    return {
        "aifi": {
            "norm1": init.layer_norm(c),
            "attn": init.attention(c),
            "norm2": init.layer_norm(c),
            "mlp": init.mlp([c, f, c]),
        },
        "ccff": {
            "td16": build_fuse_block(c, h, init),
            "td8": build_fuse_block(c, h, init),
            "down8": init.conv_norm(c, c, 3),
            "bu16": build_fuse_block(c, h, init),
            "down16": init.conv_norm(c, c, 3),
            "bu32": build_fuse_block(c, h, init),
        },
    }


# ---------------------------------------------------------------------------
# forward


def _conv_norm(x: Tensor, p: dict, stride: int = 1, act: bool = True) -> Tensor:
    k = p["weight"].shape[-1]
    y = tk.conv2d(x, p["weight"], stride=stride, padding=k // 2)
    y = tk.channel_affine(y, p["norm"]["weight"], p["norm"]["bias"])
    return tk.silu(y) if act else y


def aifi(f32: Tensor, params: dict, config: EncoderConfig, return_weights: bool = False):
    c, h, w = f32.shape
    if c != config.hidden_dim:
        raise DimensionError(f"AIFI expects {config.hidden_dim} channels, got {c}")
    x = f32.reshape(c, h * w).T
    pos = sincos_2d(h, w, c)
    n1, n2 = params["norm1"], params["norm2"]
    hdn = tk.layer_norm(x, n1["weight"], n1["bias"])
    attn = tk.mhsa(hdn, params["attn"], config.aifi_heads, pos=pos, return_weights=return_weights)
    if return_weights:
        attn, weights = attn
    x = x + attn
    hdn = tk.layer_norm(x, n2["weight"], n2["bias"])
    fc1, fc2 = params["mlp"]
    x = x + tk.linear(tk.gelu(tk.linear(hdn, fc1["weight"], fc1["bias"])), fc2["weight"], fc2["bias"])
    out = x.T.reshape(c, h, w).astype(tk.DTYPE, copy=False)
    return (out, weights) if return_weights else out


def fuse_block(coarse: Tensor, fine: Tensor, p: dict) -> Tensor:
    """``r + conv(conv(r))`` with ``r`` the 1x1 reduction of ``[fine; coarse]``."""
    r = _conv_norm(np.concatenate([fine, coarse], axis=0), p["reduce"], act=False)
    return r + _conv_norm(_conv_norm(r, p["conv1"]), p["conv2"])


def _check_ratio(big: Tensor, small: Tensor) -> None:
    if big.shape[1] != 2 * small.shape[1] or big.shape[2] != 2 * small.shape[2]:
        raise DimensionError(f"levels {big.shape} and {small.shape} are not in a 2x ratio")


def ccff(f32_refined: Tensor, f16: Tensor, f8: Tensor, params: dict) -> EncodedFeatures:
    _check_ratio(f16, f32_refined)
    _check_ratio(f8, f16)
    t16 = fuse_block(tk.upsample_nearest2x(f32_refined), f16, params["td16"])
    e8 = fuse_block(tk.upsample_nearest2x(t16), f8, params["td8"])
    e16 = fuse_block(_conv_norm(e8, params["down8"], stride=2), t16, params["bu16"])
    e32 = fuse_block(_conv_norm(e16, params["down16"], stride=2), f32_refined, params["bu32"])
    return EncodedFeatures(e8, e16, e32)


def encoder_forward(pyr: FeaturePyramid, params: dict, config: EncoderConfig) -> EncodedFeatures:
    with tk.scope("aifi"):
        f32r = aifi(pyr.f32, params["aifi"], config)
    with tk.scope("ccff"):
        return ccff(f32r, pyr.f16, pyr.f8, params["ccff"])
