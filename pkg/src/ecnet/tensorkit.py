"""Dense float32 tensor primitives.

Tensors are plain ``numpy.ndarray`` values of dtype float32 in row-major
order. Every op here is a pure function of its inputs. Ops that perform
multiply-accumulates report them to an optional :func:`count_macs` context so
the budget module can cross-check its closed-form FLOP estimates against what
the forward pass actually executes.
"""
from __future__ import annotations

import contextlib
import contextvars
from collections import defaultdict
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

Tensor = np.ndarray
DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """Raised for invalid structural configuration (heads, widths, ranges)."""


def tensor(data, shape=None) -> Tensor:
    """Build a float32 tensor, rejecting NaN/Inf values.

    ``shape`` may be given to reshape flat row-major data; the element count
    must match exactly.
    """
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"shape must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return arr


# ---------------------------------------------------------------------------
# MAC accounting


class MacCounter:
    def __init__(self) -> None:
        self.by_scope: dict[str, int] = defaultdict(int)

    def add(self, scope: str, macs: int) -> None:
        self.by_scope[scope] += int(macs)

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def grouped(self, depth: int = 1) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for name, macs in self.by_scope.items():
            key = ".".join(name.split(".")[:depth]) if name else ""
            out[key] += macs
        return dict(out)


_COUNTER: contextvars.ContextVar[Optional[MacCounter]] = contextvars.ContextVar(
    "ecnet_mac_counter", default=None
)
_SCOPE: contextvars.ContextVar[str] = contextvars.ContextVar("ecnet_mac_scope", default="")


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


@contextlib.contextmanager
def scope(name: str) -> Iterator[None]:
    parent = _SCOPE.get()
    token = _SCOPE.set(f"{parent}.{name}" if parent else name)
    try:
        yield
    finally:
        _SCOPE.reset(token)


def tally(macs: int) -> None:
    counter = _COUNTER.get()
    if counter is not None:
        counter.add(_SCOPE.get(), macs)


# ---------------------------------------------------------------------------
# elementwise


def sigmoid(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=DTYPE)
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(DTYPE)


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = np.clip(np.asarray(x, dtype=DTYPE), 0.0, 1.0)
    return np.log(np.maximum(x, eps) / np.maximum(1.0 - x, eps)).astype(DTYPE)


def silu(x: Tensor) -> Tensor:
    return (x * sigmoid(x)).astype(DTYPE)


def gelu(x: Tensor) -> Tensor:
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(DTYPE)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = np.asarray(x, dtype=DTYPE)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return (e / np.sum(e, axis=axis, keepdims=True)).astype(DTYPE)


# ---------------------------------------------------------------------------
# linear maps


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``y = x @ W.T + b`` over every leading index."""
    x = np.asarray(x, dtype=DTYPE)
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"linear expects trailing dim {d_in}, got {x.shape}")
    y = x @ weight.T
    if bias is not None:
        if bias.shape != (d_out,):
            raise DimensionError(f"bias shape {bias.shape} != ({d_out},)")
        y = y + bias
    tally(int(np.prod(x.shape[:-1])) * d_in * d_out)
    return y.astype(DTYPE, copy=False)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """Direct 2-D convolution of a [C_in, H, W] map with zero padding."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError("conv2d expects input [C,H,W] and weight [O,I,k,k]")
    c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if stride < 1 or dilation < 1 or kh < 1:
        raise DimensionError("stride, dilation and kernel size must be >= 1")
    if c_in % groups or c_out % groups or c_in // groups != c_in_g:
        raise DimensionError(
            f"channels {c_in}->{c_out} incompatible with weight {weight.shape} and groups={groups}"
        )
    h_out = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    w_out = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError("conv2d output would be empty")

    if kh == 1 and kw == 1 and padding == 0:
        win = x[:, :: stride, :: stride][:, :h_out, :w_out][..., None, None]
    else:
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
        span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
        win = sliding_window_view(xp, (span_h, span_w), axis=(1, 2))
        win = win[:, : (h_out - 1) * stride + 1 : stride, : (w_out - 1) * stride + 1 : stride]
        win = win[..., ::dilation, ::dilation]

    o_g = c_out // groups
    if groups == 1:
        cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(h_out * w_out, -1)
        out = (weight.reshape(c_out, -1) @ cols.T).reshape(c_out, h_out, w_out)
    elif c_in_g == 1 and o_g == 1:
        # depthwise
        out = np.einsum("chwij,cij->chw", win, weight[:, 0], optimize=True)
    else:
        win_g = win.reshape(groups, c_in_g, h_out, w_out, kh, kw)
        w_g = weight.reshape(groups, o_g, c_in_g, kh, kw)
        out = np.einsum("gchwij,gocij->gohw", win_g, w_g, optimize=True).reshape(c_out, h_out, w_out)
    if bias is not None:
        out = out + bias[:, None, None]
    tally(c_out * h_out * w_out * c_in_g * kh * kw)
    return out.astype(DTYPE, copy=False)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != gamma.shape[-1]:
        raise DimensionError(f"layer_norm dim {gamma.shape} vs input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / np.sqrt(var + eps) * gamma + beta).astype(DTYPE, copy=False)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale/shift on a [C,H,W] map (inference-mode batch norm)."""
    return (x * gamma[:, None, None] + beta[:, None, None]).astype(DTYPE, copy=False)


# ---------------------------------------------------------------------------
# attention


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, return_weights: bool = False):
    """Scaled dot-product attention on already-projected [n, D] inputs.

    Returns the concatenated per-head output [n_q, D] and, if requested, the
    attention weights [heads, n_q, n_k].
    """
    n_q, d = q.shape
    n_k = k.shape[0]
    if d % heads:
        raise ConfigError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads
    qh = q.reshape(n_q, heads, dh).transpose(1, 0, 2)
    kh = k.reshape(n_k, heads, dh).transpose(1, 0, 2)
    vh = v.reshape(n_k, heads, dh).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * DTYPE(1.0 / np.sqrt(dh))
    w = softmax(scores, axis=-1)
    out = (w @ vh).transpose(1, 0, 2).reshape(n_q, d).astype(DTYPE, copy=False)
    tally(2 * n_q * n_k * d)
    if return_weights:
        return out, w
    return out


def multi_head_self_attention(
    tokens: Tensor,
    heads: int,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bq: Optional[Tensor] = None,
    bk: Optional[Tensor] = None,
    bv: Optional[Tensor] = None,
    bo: Optional[Tensor] = None,
    pos: Optional[Tensor] = None,
    return_weights: bool = False,
):
    """Self-attention over [n, D] tokens; ``pos`` is added to queries and keys only."""
    tokens = np.asarray(tokens, dtype=DTYPE)
    n, d = tokens.shape
    if d % heads:
        raise ConfigError(f"dim {d} not divisible by {heads} heads")
    qk_in = tokens if pos is None else tokens + pos
    q = linear(qk_in, wq, bq)
    k = linear(qk_in, wk, bk)
    v = linear(tokens, wv, bv)
    out = attention(q, k, v, heads, return_weights=return_weights)
    if return_weights:
        out, w = out
        return linear(out, wo, bo), w
    return linear(out, wo, bo)


def mhsa(tokens: Tensor, p: dict, heads: int, pos: Optional[Tensor] = None, return_weights=False):
    """:func:`multi_head_self_attention` with weights taken from a param dict."""
    return multi_head_self_attention(
        tokens, heads, p["wq"], p["wk"], p["wv"], p["wo"],
        p.get("bq"), p.get("bk"), p.get("bv"), p.get("bo"),
        pos=pos, return_weights=return_weights,
    )


# ---------------------------------------------------------------------------
# resampling


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(DTYPE)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-centre bilinear resize of a [C,H,W] map with border clamping."""
    if out_h < 1 or out_w < 1:
        raise DimensionError("output size must be >= 1")
    x = np.asarray(x, dtype=DTYPE)
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ry = _resize_matrix(h, out_h)
    rx = _resize_matrix(w, out_w)
    return np.einsum("yh,chw,xw->cyx", ry, x, rx, optimize=True).astype(DTYPE, copy=False)


def upsample_nearest2x(x: Tensor) -> Tensor:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def sample_points(x: Tensor, xy: Tensor) -> Tensor:
    """Bilinearly sample a [C,H,W] map at normalized points ``xy[..., 2]``.

    A normalized coordinate u maps to pixel coordinate ``u * W - 0.5`` so that
    pixel centres sit at ``(i + 0.5) / W``. Neighbours outside the map read as
    zero. Returns [..., C].
    """
    x = np.asarray(x, dtype=DTYPE)
    c, h, w = x.shape
    xy = np.asarray(xy, dtype=np.float64)
    lead = xy.shape[:-1]
    px = xy[..., 0].reshape(-1) * w - 0.5
    py = xy[..., 1].reshape(-1) * h - 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    flat = np.concatenate([x.reshape(c, h * w), np.zeros((c, 1), DTYPE)], axis=1).T
    out = np.zeros((px.size, c), dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = (x0 + dx).astype(np.int64)
            yi = (y0 + dy).astype(np.int64)
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.where(inside, yi * w + xi, h * w)
            out += (wx * wy)[:, None] * flat[idx]
    return out.reshape(*lead, c).astype(DTYPE)


def sample_point(x: Tensor, px: float, py: float) -> Tensor:
    """Sample one normalized point; see :func:`sample_points`."""
    return sample_points(x, np.array([px, py]))
