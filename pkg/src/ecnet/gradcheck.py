"""Finite-difference verification of every analytic loss gradient."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from .scenes import random_boxes, random_keypoints

STEP = 1e-4
# OKS Gaussians can be ~1e-3 wide, where a 1e-4 stencil has visible truncation error
OKS_STEP = 1e-6
TOLERANCE = 1e-4
QUADRATIC_TOLERANCE = 1e-5


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of a scalar function over every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def relative_error(analytic, numeric) -> float:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


@dataclass
class GradResult:
    name: str
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {"name": self.name, "trials": self.trials, "max_rel_error": self.max_rel_error,
                "tolerance": self.tolerance, "ok": self.ok}


def _giou_pair(rng, margin: float = 1e-3):
    # keep every compared edge pair apart so no kink sits inside the stencil
    while True:
        a, b = L.cxcywh_to_xyxy(random_boxes(rng, 2))
        gaps = [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3],
                min(a[2], b[2]) - max(a[0], b[0]), min(a[3], b[3]) - max(a[1], b[1])]
        if min(abs(x) for x in gaps) > margin:
            return a, b


def check_giou(rng, trials: int) -> GradResult:
    worst = 0.0
    for _ in range(trials):
        a, b = _giou_pair(rng)
        _, g = L.giou_loss_grad(a, b)
        n = numeric_grad(lambda x: L.giou_loss_grad(x, b)[0], a)
        worst = max(worst, relative_error(g, n))
    return GradResult("giou_loss", trials, worst, TOLERANCE)


def check_oks(rng, trials: int) -> GradResult:
    worst = 0.0
    for _ in range(trials):
        box = random_boxes(rng, 1)
        gt, vis = random_keypoints(rng, box)
        pred = gt[0] + rng.normal(0, 0.03, gt[0].shape)
        s = float(np.sqrt(box[0, 2] * box[0, 3]))
        _, g = L.oks_loss_grad(pred, gt[0], vis[0], s)
        n = numeric_grad(lambda x: L.oks_loss_grad(x, gt[0], vis[0], s, with_grad=False)[0], pred, OKS_STEP)
        worst = max(worst, relative_error(g, n))
    return GradResult("oks_loss", trials, worst, TOLERANCE)


def check_kpt_l1(rng, trials: int) -> GradResult:
    worst = 0.0
    for _ in range(trials):
        gt = rng.random((17, 2))
        diff = rng.uniform(0.01, 0.2, gt.shape) * rng.choice([-1.0, 1.0], gt.shape)
        pred = gt + diff
        vis = (rng.random(17) < 0.8).astype(np.float64)
        _, g = L.kpt_l1_loss_grad(pred, gt, vis)
        n = numeric_grad(lambda x: L.kpt_l1_loss(x, gt, vis), pred)
        worst = max(worst, relative_error(g, n))
    return GradResult("kpt_l1_loss", trials, worst, TOLERANCE)


def check_vfl(rng, trials: int) -> GradResult:
    worst = 0.0
    for _ in range(trials):
        n_q, n_c = 6, 5
        z = rng.uniform(-4, 4, (n_q, n_c))
        q = np.zeros((n_q, n_c))
        matched = rng.choice(n_q, 3, replace=False)
        q[matched, rng.integers(0, n_c, 3)] = rng.uniform(0.05, 1.0, 3)
        _, g = L.vfl_cls_loss_grad(z, q)
        n = numeric_grad(lambda x: L.vfl_cls_loss(x, q, 3), z)
        worst = max(worst, relative_error(g, n))
    return GradResult("vfl_cls_loss", trials, worst, TOLERANCE)


def check_bce(rng, trials: int) -> GradResult:
    worst = 0.0
    for _ in range(trials):
        z = rng.normal(0, 2, (8, 8))
        gt = (rng.random((8, 8)) < 0.4).astype(np.float64)
        _, g = L.bce_mask_loss_grad(z, gt)
        n = numeric_grad(lambda x: L.bce_mask_loss(x, gt), z)
        worst = max(worst, relative_error(g, n))
    return GradResult("bce_mask_loss", trials, worst, TOLERANCE)


def check_dice(rng, trials: int) -> GradResult:
    worst = 0.0
    for _ in range(trials):
        p = rng.uniform(0.05, 0.95, (8, 8))
        gt = (rng.random((8, 8)) < 0.4).astype(np.float64)
        _, g = L.dice_loss_grad(p, gt)
        n = numeric_grad(lambda x: L.dice_loss(x, gt), p)
        worst = max(worst, relative_error(g, n))
    return GradResult("dice_loss", trials, worst, TOLERANCE)


def check_distill(rng, trials: int) -> GradResult:
    worst = 0.0
    for _ in range(trials):
        n_tok, ds, dt = 5, 4, 3
        x = rng.normal(size=(n_tok, ds))
        ts = [rng.normal(size=(n_tok, dt)) for _ in range(2)]
        ad = {"weight": rng.normal(size=(dt, ds)), "bias": rng.normal(size=dt)}
        _, grads = L.distill_loss(x, ts, ad)
        checks = [
            (grads["weight"], numeric_grad(lambda w: L.distill_loss(x, ts, {"weight": w, "bias": ad["bias"]})[0], ad["weight"])),
            (grads["bias"], numeric_grad(lambda b: L.distill_loss(x, ts, {"weight": ad["weight"], "bias": b})[0], ad["bias"])),
            (grads["student"], numeric_grad(lambda s: L.distill_loss(s, ts, ad)[0], x)),
        ]
        worst = max([worst] + [relative_error(a, n) for a, n in checks])
    return GradResult("distill_loss", trials, worst, QUADRATIC_TOLERANCE)


CHECKS = (check_giou, check_oks, check_kpt_l1, check_bce, check_dice, check_vfl, check_distill)


def run_all(seed: int = 0, trials: int = 100) -> list[GradResult]:
    # one generator per check keeps each suite independent of the others' draws
    seeds = np.random.SeedSequence(seed).spawn(len(CHECKS))
    return [check(np.random.default_rng(s), trials) for check, s in zip(CHECKS, seeds)]
