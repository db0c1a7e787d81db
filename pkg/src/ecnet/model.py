"""Full network: backbone -> pyramid -> encoder -> decoder (+ task heads)."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensorkit as tk
from .decoder import DecoderConfig, DecoderOutput, build_decoder, decoder_forward, initial_queries
from .ecvit import BackboneConfig, BackboneOutput, backbone_forward, build_backbone
from .encoder import EncodedFeatures, EncoderConfig, build_encoder, encoder_forward
from .params import Init, freeze, num_params
from .pyramid import FeaturePyramid, build_pyramid, fuse_layers, fused_channels, make_pyramid, resolve_range
from .tensorkit import ConfigError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    name: str = "S"
    task: str = "detect"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    fusion: str = "mean"
    fusion_layers: tuple = (-2, -1)

    def __post_init__(self):
        if self.decoder.hidden_dim != self.encoder.hidden_dim:
            raise ConfigError("decoder hidden_dim must equal encoder hidden_dim")
        if self.decoder.task != self.task:
            raise ConfigError("decoder task must match model task")
        resolve_range(self.fusion_layers, self.backbone.depth)
        fused_channels(self.backbone.embed_dim, self.fusion, len(self.fusion_layers))

    @property
    def fused_dim(self) -> int:
        return fused_channels(self.backbone.embed_dim, self.fusion, len(self.fusion_layers))

    def with_backbone(self, **kw) -> "ModelConfig":
        return replace(self, backbone=replace(self.backbone, **kw))


@dataclass
class Model:
    config: ModelConfig
    params: dict

    @property
    def num_params(self) -> int:
        return num_params(self.params)


@dataclass
class ForwardResult:
    backbone: BackboneOutput
    fused: Tensor
    pyramid: FeaturePyramid
    encoded: EncodedFeatures
    decoded: DecoderOutput

    @property
    def predictions(self):
        return self.decoded.final


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    init = Init(np.random.default_rng(seed))
    params = {
        "backbone": build_backbone(config.backbone, init),
        "pyramid": build_pyramid(config.fused_dim, config.encoder.hidden_dim, init),
        "encoder": build_encoder(config.encoder, init),
        "decoder": build_decoder(config.decoder, init),
    }
    return Model(config, freeze(params))


def forward(model: Model, image: Tensor, aux_masks: bool = False) -> ForwardResult:
    cfg, p = model.config, model.params
    image = np.asarray(image, dtype=tk.DTYPE)
    if image.shape[1] % 32 or image.shape[2] % 32:
        raise tk.DimensionError(f"image size {image.shape[1:]} must be divisible by 32")
    with tk.scope("backbone"):
        bb = backbone_forward(image, p["backbone"], cfg.backbone)
    with tk.scope("pyramid"):
        fused = fuse_layers(bb, cfg.fusion, cfg.fusion_layers)
        pyr = make_pyramid(fused, p["pyramid"])
    with tk.scope("encoder"):
        enc = encoder_forward(pyr, p["encoder"], cfg.encoder)
    with tk.scope("decoder"):
        dec = decoder_forward(initial_queries(p["decoder"], cfg.decoder), enc, p["decoder"], cfg.decoder, aux_masks)
    return ForwardResult(bb, fused, pyr, enc, dec)


def random_image(seed: int, size: int | tuple = 640) -> Tensor:
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    return rng.standard_normal((3, h, w), dtype=np.float32)
