"""Detection, pose, mask and distillation losses with analytic gradients.

Scalar losses are evaluated in float64 so that their analytic gradients can
be checked against central finite differences at tight tolerances.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# COCO per-keypoint sigmas; the OKS constant is twice the sigma, so that
# exp(-d^2 / (2 s^2 k^2)) matches the COCO evaluator with s = sqrt(area).
COCO_SIGMAS = np.array(
    [0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
     0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089]
)
COCO_KAPPA = 2.0 * COCO_SIGMAS

VFL_ALPHA = 0.75
VFL_GAMMA = 2.0
DICE_EPS = 1.0


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    ddf: float = 1.5
    fgl: float = 0.15
    kpt: float = 0.0
    oks: float = 0.0
    mask: float = 0.0
    dice: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")

    @classmethod
    def detect(cls) -> "LossWeights":
        return cls(cls=1.0, l1=5.0, giou=2.0, ddf=1.5, fgl=0.15)

    @classmethod
    def pose(cls) -> "LossWeights":
        return cls(cls=2.0, l1=0.0, giou=0.0, ddf=0.0, fgl=0.0, kpt=10.0, oks=4.0)

    @classmethod
    def insseg(cls) -> "LossWeights":
        return cls(cls=2.0, l1=1.0, giou=1.0, ddf=1.5, fgl=0.15, mask=5.0, dice=5.0)

    @classmethod
    def for_task(cls, task: str) -> "LossWeights":
        return {"detect": cls.detect, "pose": cls.pose, "insseg": cls.insseg}[task]()


@dataclass
class GroundTruthSet:
    boxes: np.ndarray  # [G, 4] cxcywh, normalized
    classes: np.ndarray  # [G] int
    keypoints: Optional[np.ndarray] = None  # [G, K, 2]
    visibility: Optional[np.ndarray] = None  # [G, K] in {0, 1}
    masks: Optional[np.ndarray] = None  # [G, Hm, Wm] binary
    scales: Optional[np.ndarray] = None  # [G] person scale sqrt(area)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.classes) != len(self.boxes):
            raise ValueError("boxes and classes disagree in length")
        if np.any(self.boxes < 0) or np.any(self.boxes > 1):
            raise ValueError("ground-truth boxes must lie in [0, 1]")
        if self.visibility is not None and not np.isin(self.visibility, (0, 1)).all():
            raise ValueError("visibility must be binary")
        if self.masks is not None and not np.isin(self.masks, (0, 1)).all():
            raise ValueError("masks must be binary")
        if self.keypoints is not None and self.scales is None:
            self.scales = np.sqrt(self.boxes[:, 2] * self.boxes[:, 3])

    def __len__(self) -> int:
        return len(self.boxes)


# ---------------------------------------------------------------------------
# boxes


def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def _check_xyxy(b):
    if np.any(b[..., 2] < b[..., 0]) or np.any(b[..., 3] < b[..., 1]):
        raise ValueError("inverted box: need x2 >= x1 and y2 >= y1")


def giou(a, b) -> float:
    """Generalized IoU of two xyxy boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_xyxy(a)
    _check_xyxy(b)
    return float(pairwise_giou(a[None], b[None])[0, 0])


def pairwise_iou_giou(a, b):
    """IoU and GIoU matrices between xyxy box sets [n,4] and [m,4]."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * (
        np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        g = iou - np.where(hull > 0, (hull - union) / np.where(hull > 0, hull, 1), 0.0)
    return iou, g


def pairwise_giou(a, b):
    return pairwise_iou_giou(a, b)[1]


def giou_loss_grad(a, b) -> tuple[float, np.ndarray]:
    """``1 - GIoU(a, b)`` and its gradient with respect to the xyxy box ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_xyxy(a)
    _check_xyxy(b)
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    aw, ah = ax2 - ax1, ay2 - ay1
    area_a = aw * ah
    area_b = (bx2 - bx1) * (by2 - by1)

    ix1, iy1 = max(ax1, bx1), max(ay1, by1)
    ix2, iy2 = min(ax2, bx2), min(ay2, by2)
    iw, ih = max(ix2 - ix1, 0.0), max(iy2 - iy1, 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    hull = cw * ch
    g = inter / union - (hull - union) / hull

    d_area = np.array([-ah, -aw, ah, aw])
    # intersection edges move only when a's edge is the binding one
    if iw > 0 and ih > 0:
        d_iw = np.array([-float(ax1 > bx1), 0.0, float(ax2 < bx2), 0.0])
        d_ih = np.array([0.0, -float(ay1 > by1), 0.0, float(ay2 < by2)])
    else:
        d_iw = d_ih = np.zeros(4)
    d_inter = d_iw * ih + d_ih * iw
    d_cw = np.array([-float(ax1 < bx1), 0.0, float(ax2 > bx2), 0.0])
    d_ch = np.array([0.0, -float(ay1 < by1), 0.0, float(ay2 > by2)])
    d_hull = d_cw * ch + d_ch * cw
    d_union = d_area - d_inter
    d_g = d_inter / union - inter * d_union / union**2 + d_union / hull - union * d_hull / hull**2
    return 1.0 - g, -d_g


def giou_loss_grad_cxcywh(a, b) -> tuple[float, np.ndarray]:
    """As :func:`giou_loss_grad` for cxcywh boxes; gradient wrt ``a`` in cxcywh."""
    loss, g = giou_loss_grad(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))
    jac = np.array([[1, 0, -0.5, 0], [0, 1, 0, -0.5], [1, 0, 0.5, 0], [0, 1, 0, 0.5]], dtype=np.float64)
    return loss, g @ jac


def l1_box_loss(pred, gt) -> float:
    return float(np.abs(np.asarray(pred, np.float64) - np.asarray(gt, np.float64)).sum())


# ---------------------------------------------------------------------------
# keypoints


def oks(pred_kpts, gt_kpts, v, s: float, kappa=None) -> float:
    return 1.0 - oks_loss_grad(pred_kpts, gt_kpts, v, s, kappa, with_grad=False)[0]


def oks_loss_grad(pred_kpts, gt_kpts, v, s: float, kappa=None, with_grad: bool = True):
    """``1 - OKS`` and its gradient with respect to the predicted keypoints."""
    pred = np.asarray(pred_kpts, dtype=np.float64)
    gt = np.asarray(gt_kpts, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    kappa = COCO_KAPPA[: len(gt)] if kappa is None else np.asarray(kappa, dtype=np.float64)
    if s <= 0:
        raise ValueError("person scale must be positive")
    nv = v.sum()
    if nv < 1:
        raise ValueError("OKS undefined without a visible keypoint")
    diff = pred - gt
    denom = 2.0 * s**2 * kappa**2
    e = np.exp(-(diff**2).sum(-1) / denom)
    loss = 1.0 - float((v * e).sum() / nv)
    if not with_grad:
        return loss, None
    grad = (v * e / nv * 2.0 / denom)[:, None] * diff
    return loss, grad


def pairwise_oks(pred_kpts, gt_kpts, v, scales, kappa=None):
    """OKS matrix [G, N] between N predictions and G ground truths."""
    pred = np.asarray(pred_kpts, dtype=np.float64)[None]  # [1,N,K,2]
    gt = np.asarray(gt_kpts, dtype=np.float64)[:, None]  # [G,1,K,2]
    v = np.asarray(v, dtype=np.float64)[:, None]  # [G,1,K]
    k = gt.shape[2]
    kappa = COCO_KAPPA[:k] if kappa is None else np.asarray(kappa, np.float64)
    s = np.asarray(scales, dtype=np.float64)[:, None, None]
    d2 = ((pred - gt) ** 2).sum(-1)
    e = np.exp(-d2 / (2.0 * s**2 * kappa**2))
    nv = np.maximum(v.sum(-1), 1.0)
    return (v * e).sum(-1) / nv


def kpt_l1_loss(pred, gt, v) -> float:
    return kpt_l1_loss_grad(pred, gt, v)[0]


def kpt_l1_loss_grad(pred, gt, v):
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(gt, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)[:, None]
    return float((v * np.abs(diff)).sum()), v * np.sign(diff)


# ---------------------------------------------------------------------------
# classification


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def vfl_cls_loss_grad(logits, quality, num_matched: Optional[int] = None):
    """Varifocal-style loss and gradient wrt logits.

    ``quality`` is a [N, classes] target matrix: the IoU/OKS score at the
    matched query's ground-truth class, zero elsewhere.
    """
    z = np.asarray(logits, dtype=np.float64)
    q = np.asarray(quality, dtype=np.float64)
    if z.shape != q.shape:
        raise ValueError(f"logits {z.shape} vs targets {q.shape}")
    if np.any(q < 0) or np.any(q > 1):
        raise ValueError("quality targets must lie in [0, 1]")
    if num_matched is None:
        num_matched = int(np.count_nonzero((q > 0).any(-1)))
    norm = max(num_matched, 1)
    p = 1.0 / (1.0 + np.exp(-z))
    log_p, log_1mp = _log_sigmoid(z), _log_sigmoid(-z)
    pos = q > 0
    pos_term = -q * (q * log_p + (1.0 - q) * log_1mp)
    neg_term = -VFL_ALPHA * p**VFL_GAMMA * log_1mp
    loss = np.where(pos, pos_term, neg_term).sum() / norm
    d_pos = q * (p - q)
    d_neg = VFL_ALPHA * p**VFL_GAMMA * (p - VFL_GAMMA * (1.0 - p) * log_1mp)
    grad = np.where(pos, d_pos, d_neg) / norm
    return float(loss), grad


def vfl_cls_loss(logits, quality, num_matched: Optional[int] = None) -> float:
    return vfl_cls_loss_grad(logits, quality, num_matched)[0]


def quality_targets(num_queries: int, num_classes: int, pairs, classes, scores) -> np.ndarray:
    q = np.zeros((num_queries, num_classes))
    for (g, qi), s in zip(pairs, scores):
        q[qi, int(classes[g])] = s
    return q


# ---------------------------------------------------------------------------
# masks


def bce_mask_loss_grad(pred_logits, gt):
    z = np.asarray(pred_logits, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if z.shape != g.shape:
        raise ValueError(f"mask shapes differ: {z.shape} vs {g.shape}")
    loss = -(g * _log_sigmoid(z) + (1 - g) * _log_sigmoid(-z)).mean()
    grad = (1.0 / (1.0 + np.exp(-z)) - g) / z.size
    return float(loss), grad


def bce_mask_loss(pred_logits, gt) -> float:
    return bce_mask_loss_grad(pred_logits, gt)[0]


def dice_loss_grad(pred_probs, gt, eps: float = DICE_EPS):
    p = np.asarray(pred_probs, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    inter = (p * g).sum()
    total = p.sum() + g.sum() + eps
    loss = 1.0 - (2.0 * inter + eps) / total
    grad = -(2.0 * g * total - (2.0 * inter + eps)) / total**2
    return float(loss), grad


def dice_loss(pred_probs, gt, eps: float = DICE_EPS) -> float:
    return dice_loss_grad(pred_probs, gt, eps)[0]


def rasterize_mask(mask, out_h: int, out_w: int) -> np.ndarray:
    """Area-average a binary mask onto an (out_h, out_w) grid, threshold at 0.5."""
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    if (h, w) == (out_h, out_w):
        return (m >= 0.5).astype(np.float64)
    if h % out_h or w % out_w:
        raise ValueError("mask size must be an integer multiple of the target grid")
    pooled = m.reshape(out_h, h // out_h, out_w, w // out_w).mean(axis=(1, 3))
    return (pooled >= 0.5).astype(np.float64)


# ---------------------------------------------------------------------------
# distillation


def distill_loss(student_last, teacher_feats: Sequence, adapter: dict):
    """Squared distance from one adapted student feature to every teacher feature.

    Returns ``(loss, grads)`` with grads for ``weight``, ``bias`` and the
    student tokens.
    """
    x = np.asarray(student_last, dtype=np.float64)
    w = np.asarray(adapter["weight"], dtype=np.float64)
    b = np.asarray(adapter.get("bias", np.zeros(w.shape[0])), dtype=np.float64)
    if not teacher_feats:
        raise ValueError("need at least one teacher feature")
    y = x @ w.T + b
    d_y = np.zeros_like(y)
    loss = 0.0
    for t in teacher_feats:
        t = np.asarray(t, dtype=np.float64)
        if t.shape != y.shape:
            raise ValueError(f"teacher feature {t.shape} does not match adapted student {y.shape}")
        r = y - t
        loss += float((r * r).sum())
        d_y += 2.0 * r
    return loss, {"weight": d_y.T @ x, "bias": d_y.sum(0), "student": d_y @ w}


# ---------------------------------------------------------------------------
# task totals


@dataclass
class LossReport:
    terms: dict[str, float]
    weights: dict[str, float]
    layers: int = 1
    per_layer: list[dict[str, float]] = field(default_factory=list)

    @property
    def weighted(self) -> dict[str, float]:
        return {k: self.weights[k] * v for k, v in self.terms.items()}

    @property
    def total(self) -> float:
        return float(sum(self.weighted.values()))

    def to_dict(self) -> dict:
        return {"total": self.total, "terms": self.terms, "weighted": self.weighted,
                "weights": self.weights, "layers": self.layers}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


Hook = Callable[..., float]


def _zero_hook(*_args, **_kwargs) -> float:
    return 0.0


def _box_terms(pred, gt: GroundTruthSet, pairs):
    l1 = gi = 0.0
    ious = []
    for g, q in pairs:
        l1 += l1_box_loss(pred.boxes[q], gt.boxes[g])
        a, b = cxcywh_to_xyxy(pred.boxes[q]), cxcywh_to_xyxy(gt.boxes[g])
        iou, gg = pairwise_iou_giou(a[None], b[None])
        gi += 1.0 - gg[0, 0]
        ious.append(float(iou[0, 0]))
    return l1, gi, ious


def _layer_terms(pred, gt: GroundTruthSet, match, task: str, ddf: Hook, fgl: Hook) -> dict:
    pairs = list(match.pairs)
    n_gt = max(len(gt), 1)
    logits = np.asarray(pred.class_logits, dtype=np.float64)
    terms: dict[str, float] = {}
    if task in ("detect", "insseg"):
        l1, gi, ious = _box_terms(pred, gt, pairs)
        q = quality_targets(*logits.shape, pairs, gt.classes, ious)
        terms["cls"] = vfl_cls_loss(logits, q, num_matched=len(pairs))
        terms["l1"] = l1 / n_gt
        terms["giou"] = gi / n_gt
        terms["ddf"] = float(ddf(pred, gt, match))
        terms["fgl"] = float(fgl(pred, gt, match))
    if task == "pose":
        kpts = np.asarray(pred.keypoints, dtype=np.float64)[..., :2]
        kl = ol = 0.0
        scores = []
        for g, qi in pairs:
            kl += kpt_l1_loss(kpts[qi], gt.keypoints[g], gt.visibility[g])
            o_loss, _ = oks_loss_grad(kpts[qi], gt.keypoints[g], gt.visibility[g], gt.scales[g], with_grad=False)
            ol += o_loss
            scores.append(1.0 - o_loss)
        q = quality_targets(*logits.shape, pairs, gt.classes, scores)
        terms["cls"] = vfl_cls_loss(logits, q, num_matched=len(pairs))
        terms["kpt"] = kl / n_gt
        terms["oks"] = ol / n_gt
    if task == "insseg":
        ml = dl = 0.0
        for g, qi in pairs:
            z = np.asarray(pred.mask_logits[qi], dtype=np.float64)
            target = rasterize_mask(gt.masks[g], *z.shape)
            ml += bce_mask_loss(z, target)
            dl += dice_loss(1.0 / (1.0 + np.exp(-z)), target)
        terms["mask"] = ml / n_gt
        terms["dice"] = dl / n_gt
    return terms


def _total(task, preds, gt, matches, weights: LossWeights, ddf=None, fgl=None) -> LossReport:
    if len(preds) != len(matches):
        raise ValueError("need one match per decoder layer")
    ddf, fgl = ddf or _zero_hook, fgl or _zero_hook
    per_layer = [_layer_terms(p, gt, m, task, ddf, fgl) for p, m in zip(preds, matches)]
    keys = per_layer[0].keys()
    terms = {k: float(np.mean([t[k] for t in per_layer])) for k in keys}
    w = asdict(weights)
    return LossReport(terms, {k: float(w[k]) for k in keys}, len(per_layer), per_layer)


def total_det_loss(preds, gt, matches, weights: LossWeights, ddf: Hook = None, fgl: Hook = None) -> LossReport:
    """Detection objective averaged over decoder layers.

    ``ddf`` and ``fgl`` are optional callables ``(pred, gt, match) -> float``
    for the box-distribution terms; by default they contribute zero.
    """
    return _total("detect", preds, gt, matches, weights, ddf, fgl)


def total_pose_loss(preds, gt, matches, weights: LossWeights) -> LossReport:
    return _total("pose", preds, gt, matches, weights)


def total_insseg_loss(preds, gt, matches, weights: LossWeights, ddf: Hook = None, fgl: Hook = None) -> LossReport:
    return _total("insseg", preds, gt, matches, weights, ddf, fgl)


def total_loss(task: str, preds, gt, matches, weights: LossWeights) -> LossReport:
    return {"detect": total_det_loss, "pose": total_pose_loss, "insseg": total_insseg_loss}[task](
        preds, gt, matches, weights
    )
