"""Synthetic annotations and predictions for matching and loss checks."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .decoder import PredictionSet
from .losses import GroundTruthSet, rasterize_mask

MIN_SIDE = 0.02
VISIBLE_P = 0.8


def random_boxes(rng: np.random.Generator, n: int, min_side: float = MIN_SIDE) -> np.ndarray:
    """Uniform random cxcywh boxes inside the unit square with sides >= min_side."""
    w = rng.uniform(min_side, 0.6, n)
    h = rng.uniform(min_side, 0.6, n)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return np.stack([cx, cy, w, h], axis=1)


def random_keypoints(rng: np.random.Generator, boxes: np.ndarray, k: int = 17):
    n = len(boxes)
    u = rng.uniform(-0.5, 0.5, (n, k, 2))
    kpts = boxes[:, None, :2] + u * boxes[:, None, 2:]
    vis = (rng.random((n, k)) < VISIBLE_P).astype(np.float64)
    vis[np.arange(n), rng.integers(0, k, n)] = 1.0  # at least one visible keypoint
    return kpts, vis


def box_masks(boxes: np.ndarray, size) -> np.ndarray:
    """Rectangular binary masks covering each box on an (H, W) pixel grid."""
    h, w = size
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    x1, y1 = boxes[:, 0] - boxes[:, 2] / 2, boxes[:, 1] - boxes[:, 3] / 2
    x2, y2 = boxes[:, 0] + boxes[:, 2] / 2, boxes[:, 1] + boxes[:, 3] / 2
    inside_y = (ys[None] >= y1[:, None]) & (ys[None] <= y2[:, None])
    inside_x = (xs[None] >= x1[:, None]) & (xs[None] <= x2[:, None])
    return (inside_y[:, :, None] & inside_x[:, None, :]).astype(np.float64)


def random_scene(rng: np.random.Generator, num_gt: int, task: str = "detect", num_classes: int = 80,
                 keypoints: int = 17, mask_size=(64, 64)) -> GroundTruthSet:
    boxes = random_boxes(rng, num_gt)
    classes = np.zeros(num_gt, dtype=np.int64) if task == "pose" else rng.integers(0, num_classes, num_gt)
    kw = {}
    if task == "pose":
        kw["keypoints"], kw["visibility"] = random_keypoints(rng, boxes, keypoints)
    if task == "insseg":
        kw["masks"] = box_masks(boxes, mask_size)
    return GroundTruthSet(boxes, classes, **kw)


def random_predictions(rng: np.random.Generator, num_queries: int, task: str = "detect", num_classes: int = 80,
                       keypoints: int = 17, mask_size=(16, 16)) -> PredictionSet:
    boxes = random_boxes(rng, num_queries)
    pred = PredictionSet(rng.normal(0.0, 2.0, (num_queries, num_classes)), boxes)
    if task == "pose":
        kpts, _ = random_keypoints(rng, boxes, keypoints)
        pred.keypoints = np.concatenate([kpts, rng.random((num_queries, keypoints, 1))], axis=-1)
    if task == "insseg":
        pred.mask_logits = rng.normal(0.0, 2.0, (num_queries, *mask_size))
    return pred


def perfect_predictions(gt: GroundTruthSet, num_classes: int = 80, mask_size: Optional[tuple] = None,
                        confidence: float = 40.0) -> PredictionSet:
    """One query per ground truth reproducing it exactly with saturated scores."""
    g = len(gt)
    logits = np.full((g, num_classes), -confidence)
    logits[np.arange(g), gt.classes] = confidence
    pred = PredictionSet(logits, gt.boxes.copy())
    if gt.keypoints is not None:
        pred.keypoints = np.concatenate([gt.keypoints, np.ones((*gt.keypoints.shape[:2], 1))], axis=-1)
    if gt.masks is not None:
        hm, wm = mask_size or gt.masks.shape[1:]
        target = np.stack([rasterize_mask(m, hm, wm) for m in gt.masks])
        pred.mask_logits = np.where(target > 0, confidence, -confidence)
    return pred
