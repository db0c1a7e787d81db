"""Set-prediction decoder: learned queries, self-attention, multi-scale
deformable cross-attention, FFN, and the detection / pose / mask heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensorkit as tk
from .encoder import EncodedFeatures
from .params import Init
from .tensorkit import ConfigError, Tensor

TASKS = ("detect", "pose", "insseg")


@dataclass(frozen=True)
class DecoderConfig:
    hidden_dim: int = 256
    layers: int = 4
    queries: int = 300
    ffn_dim: int = 1024
    heads: int = 8
    points: int = 4
    levels: int = 3
    task: str = "detect"
    num_classes: int = 80
    keypoints: int = 17
    mask_dim: Optional[int] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.hidden_dim % self.heads:
            raise ConfigError("hidden_dim must be divisible by decoder heads")
        if self.layers < 1 or self.queries < 1:
            raise ConfigError("layers and queries must be positive")

    @property
    def embed_dim(self) -> int:
        return self.mask_dim or self.hidden_dim // 2


@dataclass
class QueryState:
    content: Tensor  # [N, C], or [N, 1+K, C] for pose
    reference: Tensor  # [N, 4] cxcywh in [0, 1]
    keypoint_reference: Optional[Tensor] = None  # [N, K, 2]


@dataclass
class PredictionSet:
    class_logits: Tensor
    boxes: Tensor
    keypoints: Optional[Tensor] = None
    mask_logits: Optional[Tensor] = None


@dataclass
class DecoderOutput:
    layers: list[PredictionSet]
    queries: Tensor = field(repr=False)

    @property
    def final(self) -> PredictionSet:
        return self.layers[-1]


# ---------------------------------------------------------------------------
# construction


def _offset_grid_bias(heads: int, levels: int, points: int) -> np.ndarray:
    theta = np.arange(heads) * (2.0 * np.pi / heads)
    grid = np.stack([np.cos(theta), np.sin(theta)], -1)
    grid = grid / np.abs(grid).max(-1, keepdims=True)
    grid = np.tile(grid[:, None, None, :], (1, levels, points, 1))
    grid *= np.arange(1, points + 1)[None, None, :, None]
    return grid.reshape(-1).astype(tk.DTYPE)


def build_deformable(c: int, heads: int, levels: int, points: int, init: Init) -> dict:
    n = heads * levels * points
    return {
        "offsets": {"weight": init.zeros((2 * n, c)), "bias": _offset_grid_bias(heads, levels, points)},
        "weights": {"weight": init.zeros((n, c)), "bias": init.zeros(n)},
        "value": init.linear(c, c),
        "output": init.linear(c, c),
    }


def build_decoder(config: DecoderConfig, init: Init) -> dict:
    c, n, k = config.hidden_dim, config.queries, config.keypoints
    ref = init.uniform((n, 4), 0.0, 1.0)
    ref[:, 2:] = init.uniform((n, 2), 0.05, 0.3)
    params = {
        "query_content": init.normal((n, c), 1.0),
        "query_ref": tk.inverse_sigmoid(ref),
        "layers": [],
    }
    for _ in range(config.layers):
        layer = {
            "self_attn": init.attention(c),
            "norm1": init.layer_norm(c),
            "cross_attn": build_deformable(c, config.heads, config.levels, config.points, init),
            "norm2": init.layer_norm(c),
            "ffn": init.mlp([c, config.ffn_dim, c]),
            "norm3": init.layer_norm(c),
            "class_head": init.linear(c, config.num_classes),
            "box_head": init.mlp([c, c, c, 4]),
        }
        if config.task == "pose":
            layer["kpt_head"] = init.mlp([c, c, 2])
            layer["kpt_score"] = init.linear(c, 1)
        params["layers"].append(layer)
    if config.task == "pose":
        params["kpt_embed"] = init.normal((k, c), 1.0)
        # keypoint references start spread inside each query's box
        spread = init.uniform((n, k, 2), -0.5, 0.5)
        kref = np.clip(ref[:, None, :2] + spread * ref[:, None, 2:], 0.01, 0.99)
        params["kpt_ref"] = tk.inverse_sigmoid(kref)
    if config.task == "insseg":
        e = config.embed_dim
        params["mask_head"] = {
            "dwconv": init.conv(c, c, 3, groups=c),
            "pixel_mlp": init.mlp([c, e, e]),
            "query_mlp": init.mlp([c, e, e]),
        }
    return params


# ---------------------------------------------------------------------------
# building blocks


def mlp(x: Tensor, layers: list[dict], act=tk.silu) -> Tensor:
    for i, p in enumerate(layers):
        x = tk.linear(x, p["weight"], p["bias"])
        if i < len(layers) - 1:
            x = act(x)
    return x


def _ln(x: Tensor, p: dict) -> Tensor:
    return tk.layer_norm(x, p["weight"], p["bias"], eps=1e-5)


def project_values(levels: list[Tensor], params: dict) -> list[Tensor]:
    """Value projection of every level, each returned as [C, H, W]."""
    out = []
    for feat in levels:
        c, h, w = feat.shape
        v = tk.linear(feat.reshape(c, h * w).T, params["value"]["weight"], params["value"]["bias"])
        out.append(v.T.reshape(c, h, w))
    return out


def deformable_attention(
    query: Tensor,
    reference: Tensor,
    levels,
    params: dict,
    heads: int,
    points: int,
    values: Optional[list[Tensor]] = None,
    return_weights: bool = False,
):
    """Multi-scale deformable cross-attention.

    ``query`` is [n, C] (or a single [C] vector) and ``reference`` the matching
    normalized (x, y) points [n, 2]. For every head and level, ``points``
    offsets and scalar weights are predicted from the query; offsets are in
    units of the level's pixel size. Weights are normalised jointly over
    levels x points. ``levels`` is a list of [C, H, W] maps or an
    :class:`EncodedFeatures`.
    """
    if isinstance(levels, EncodedFeatures):
        levels = levels.levels()
    single = np.ndim(query) == 1
    q = np.atleast_2d(np.asarray(query, dtype=tk.DTYPE))
    ref = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    n, c = q.shape
    if c % heads:
        raise ConfigError("hidden dim not divisible by heads")
    n_lv, dh = len(levels), c // heads
    if values is None:
        values = project_values(levels, params)

    off = tk.linear(q, params["offsets"]["weight"], params["offsets"]["bias"]).reshape(n, heads, n_lv, points, 2)
    logits = tk.linear(q, params["weights"]["weight"], params["weights"]["bias"]).reshape(n, heads, n_lv * points)
    attn = tk.softmax(logits, axis=-1).reshape(n, heads, n_lv, points)

    out = np.zeros((n, heads, dh), dtype=tk.DTYPE)
    for lv, val in enumerate(values):
        _, h, w = val.shape
        loc = ref[:, None, None, :] + off[:, :, lv].astype(np.float64) / np.array([w, h])
        per_head = val.reshape(heads, dh, h, w)
        for hd in range(heads):
            s = tk.sample_points(per_head[hd], loc[:, hd])  # [n, P, dh]
            out[:, hd] += np.einsum("np,npd->nd", attn[:, hd, lv], s)
    tk.tally(n * n_lv * points * c)
    res = tk.linear(out.reshape(n, c), params["output"]["weight"], params["output"]["bias"])
    if single:
        res = res[0]
    return (res, attn) if return_weights else res


def grouped_pose_attention(tokens: Tensor, params: dict, heads: int, return_weights: bool = False):
    """Self-attention over [N, T, C] person-query tokens.

    A token attends to every token of its own query and to the token of the
    same type (instance or keypoint k) in every other query; this equals a
    dense masked attention without materialising the (N*T)^2 mask.
    """
    n, t, c = tokens.shape
    dh = c // heads
    flat = tokens.reshape(n * t, c)
    q = tk.linear(flat, params["wq"], params["bq"]).reshape(n, t, heads, dh)
    k = tk.linear(flat, params["wk"], params["bk"]).reshape(n, t, heads, dh)
    v = tk.linear(flat, params["wv"], params["bv"]).reshape(n, t, heads, dh)
    scale = tk.DTYPE(1.0 / np.sqrt(dh))
    intra = np.einsum("nthd,nshd->nhts", q, k, optimize=True) * scale  # [n,h,t,t]
    inter = np.einsum("nthd,mthd->nhtm", q, k, optimize=True) * scale  # [n,h,t,n]
    diag = np.arange(n)
    inter[diag, :, :, diag] = -np.inf
    scores = np.concatenate([intra, inter], axis=-1)
    w = tk.softmax(scores, axis=-1)
    w_intra, w_inter = w[..., :t], w[..., t:]
    out = np.einsum("nhts,nshd->nthd", w_intra, v, optimize=True)
    out = out + np.einsum("nhtm,mthd->nthd", w_inter, v, optimize=True)
    tk.tally(2 * n * t * (t + n) * c)
    out = tk.linear(out.reshape(n * t, c), params["wo"], params["bo"]).reshape(n, t, c)
    return (out, w) if return_weights else out


def mask_logits_from_embeddings(query_embed: Tensor, pixel_embed: Tensor) -> Tensor:
    """[N, E] x [E, H, W] -> [N, H, W] dot products."""
    e, h, w = pixel_embed.shape
    tk.tally(query_embed.shape[0] * e * h * w)
    return (query_embed @ pixel_embed.reshape(e, h * w)).reshape(-1, h, w).astype(tk.DTYPE, copy=False)


def mask_head(queries_final: Tensor, e8: Tensor, params: dict) -> Tensor:
    c, h, w = e8.shape
    x = tk.bilinear_resize(e8, 2 * h, 2 * w)
    dw = params["dwconv"]
    x = tk.conv2d(x, dw["weight"], dw["bias"], padding=1, groups=c)
    pix = mlp(x.reshape(c, -1).T, params["pixel_mlp"], act=tk.gelu)  # [HW, E]
    pix = pix.T.reshape(-1, 2 * h, 2 * w)
    qe = mlp(queries_final, params["query_mlp"], act=tk.gelu)
    return mask_logits_from_embeddings(qe, pix)


# ---------------------------------------------------------------------------
# forward


def initial_queries(params: dict, config: DecoderConfig) -> QueryState:
    content = params["query_content"]
    ref = tk.sigmoid(params["query_ref"])
    if config.task != "pose":
        return QueryState(content, ref)
    tokens = np.concatenate([content[:, None, :], content[:, None, :] + params["kpt_embed"][None]], axis=1)
    return QueryState(tokens, ref, tk.sigmoid(params["kpt_ref"]))


def _refine(ref: Tensor, delta: Tensor) -> Tensor:
    return tk.sigmoid(tk.inverse_sigmoid(ref) + delta)


def decoder_forward(
    queries: QueryState,
    enc: EncodedFeatures,
    params: dict,
    config: DecoderConfig,
    aux_masks: bool = False,
) -> DecoderOutput:
    levels = enc.levels()
    if levels[0].shape[0] != config.hidden_dim:
        raise ConfigError(f"encoder width {levels[0].shape[0]} != decoder hidden {config.hidden_dim}")
    pose = config.task == "pose"
    x = queries.content
    ref = queries.reference
    kref = queries.keypoint_reference
    n, c = config.queries, config.hidden_dim
    t = config.keypoints + 1 if pose else 1
    preds = []
    for li, lp in enumerate(params["layers"]):
        with tk.scope(f"layer{li}"):
            if pose:
                x = _ln(x + grouped_pose_attention(x, lp["self_attn"], config.heads), lp["norm1"])
                flat = x.reshape(n * t, c)
                pts = np.concatenate([ref[:, None, :2], kref], axis=1).reshape(n * t, 2)
            else:
                x = _ln(x + tk.mhsa(x, lp["self_attn"], config.heads), lp["norm1"])
                flat = x
                pts = ref[:, :2]
            ca = deformable_attention(flat, pts, levels, lp["cross_attn"], config.heads, config.points)
            flat = _ln(flat + ca, lp["norm2"])
            if pose:
                # FFN runs on instance tokens only; keypoint tokens are updated by attention
                x = flat.reshape(n, t, c).copy()
                inst = x[:, 0]
                x[:, 0] = _ln(inst + mlp(inst, lp["ffn"], act=tk.gelu), lp["norm3"])
            else:
                x = _ln(flat + mlp(flat, lp["ffn"], act=tk.gelu), lp["norm3"])

            inst = x[:, 0] if pose else x
            logits = tk.linear(inst, lp["class_head"]["weight"], lp["class_head"]["bias"])
            ref = _refine(ref, mlp(inst, lp["box_head"]))
            pred = PredictionSet(logits, ref)
            if pose:
                kt = x[:, 1:]
                kref = _refine(kref, mlp(kt, lp["kpt_head"]))
                score = tk.sigmoid(tk.linear(kt, lp["kpt_score"]["weight"], lp["kpt_score"]["bias"]))
                pred.keypoints = np.concatenate([kref, score], axis=-1).astype(tk.DTYPE)
            if config.task == "insseg" and (aux_masks or li == len(params["layers"]) - 1):
                with tk.scope("mask_head"):
                    pred.mask_logits = mask_head(inst, enc.e8, params["mask_head"])
            preds.append(pred)
    return DecoderOutput(preds, x)
