"""Bipartite matching of ground truths to queries.

``hungarian`` solves the rectangular assignment with Kuhn-Munkres
potentials, then walks the equality graph of the optimal duals to pick the
lexicographically smallest optimal pair sequence, so ties resolve the same
way as the exhaustive ``brute_force_match``.
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import losses as L
from .losses import GroundTruthSet, LossWeights

BRUTE_FORCE_MAX_G = 8


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class MatchAssignment:
    pairs: tuple  # ((gt_index, query_index), ...) sorted by gt index
    total_cost: float

    @property
    def queries(self) -> list[int]:
        return [q for _, q in self.pairs]

    def to_dict(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs], "total_cost": self.total_cost}


def _validate(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise MatchingError(f"cost matrix must be 2-D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise MatchingError("cost matrix contains non-finite entries")
    if c.shape[0] > c.shape[1]:
        raise MatchingError(f"more ground truths ({c.shape[0]}) than queries ({c.shape[1]})")
    return c


def _assignment(c: np.ndarray, cols) -> MatchAssignment:
    pairs = tuple((g, int(q)) for g, q in enumerate(cols))
    return MatchAssignment(pairs, math.fsum(c[g, q] for g, q in pairs))


def _potentials(c: np.ndarray):
    """Shortest augmenting path Kuhn-Munkres, O(G^2 N).

    Returns row potentials u, column potentials v (v <= 0) and the column
    matched to each row.
    """
    g, n = c.shape
    inf = math.inf
    u = np.zeros(g + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # 1-based row owning each column, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    a = np.zeros((g + 1, n + 1))
    a[1:, 1:] = c
    for i in range(1, g + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    match = np.zeros(g, dtype=np.int64)
    for j in range(1, n + 1):
        if owner[j]:
            match[owner[j] - 1] = j - 1
    return u[1:], v[1:], match


def _lexicographic(c: np.ndarray, u, v, match) -> list[int]:
    """Smallest optimal column sequence, searched within the equality graph."""
    g, n = c.shape
    scale = 1.0 + float(np.abs(c).max(initial=0.0))
    tol = 1e-9 * scale
    tight = (c - u[:, None] - v[None, :]) <= tol
    # columns with strictly negative potential must be covered in any optimum
    must = v < -tol
    # pad with n - g dummy rows; a dummy may take only columns free to stay empty
    dummy_ok = ~must
    row_of = np.full(n, -1, dtype=np.int64)  # real rows >= 0; dummy rows -2 - k
    col_of = list(match) + [-1] * (n - g)
    for r, q in enumerate(match):
        row_of[q] = r
    k = g
    for q in range(n):
        if row_of[q] == -1:
            row_of[q] = -2 - (k - g)
            col_of[k] = q
            k += 1
    fixed = np.zeros(g, dtype=bool)

    def adj(row: int):
        if row >= 0:
            return np.flatnonzero(tight[row])
        return np.flatnonzero(dummy_ok)

    def idx(row: int) -> int:
        return row if row >= 0 else g + (-2 - row)

    def augment(start_row: int, target_col: int, blocked: set) -> Optional[list]:
        # BFS for an alternating path start_row -> ... -> target_col
        prev = {start_row: None}
        queue = [start_row]
        while queue:
            nxt = []
            for r in queue:
                for col in adj(r):
                    col = int(col)
                    if col in blocked:
                        continue
                    if col == target_col:
                        path, cur = [(r, col)], r
                        while prev[cur] is not None:
                            pr, pc = prev[cur]
                            path.append((pr, pc))
                            cur = pr
                        return path
                    owner = int(row_of[col])
                    if owner in prev or (owner >= 0 and fixed[owner]):
                        continue
                    prev[owner] = (r, col)
                    nxt.append(owner)
            queue = nxt
        return None

    for r in range(g):
        current = col_of[r]
        for q in np.flatnonzero(tight[r]):
            q = int(q)
            if q >= current:
                break
            other = int(row_of[q])
            if other >= 0 and fixed[other]:
                continue
            blocked = {col_of[i] for i in range(g) if fixed[i]} | {q}
            path = augment(other, current, blocked)
            if path is None:
                continue
            for pr, pc in path:
                row_of[pc] = pr
                col_of[idx(pr)] = pc
            row_of[q] = r
            col_of[r] = q
            break
        fixed[r] = True
    return [int(col_of[r]) for r in range(g)]


def hungarian(cost) -> MatchAssignment:
    """Globally optimal assignment with lexicographic tie-breaking."""
    c = _validate(cost)
    if c.shape[0] == 0:
        return MatchAssignment((), 0.0)
    u, v, match = _potentials(c)
    return _assignment(c, _lexicographic(c, u, v, match))


@functools.lru_cache(maxsize=16)
def _permutations(n: int, g: int) -> np.ndarray:
    """All injective maps range(g) -> range(n), lexicographically ordered."""
    return np.array(list(itertools.permutations(range(n), g)), dtype=np.int64)


def brute_force_match(cost) -> MatchAssignment:
    """Exhaustive oracle; enumerates injective maps in lexicographic order."""
    c = _validate(cost)
    g, n = c.shape
    if g > BRUTE_FORCE_MAX_G:
        raise MatchingError(f"brute force limited to {BRUTE_FORCE_MAX_G} ground truths, got {g}")
    if g == 0:
        return MatchAssignment((), 0.0)
    perms = _permutations(n, g)
    # sorting before summing makes each total depend only on the multiset of costs
    totals = np.sort(c[np.arange(g), perms], axis=1).sum(axis=1)
    best_cols = perms[int(np.argmin(totals))]
    return _assignment(c, best_cols)


# ---------------------------------------------------------------------------
# costs


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def _require(pred, gt, task):
    need = {"pose": [("keypoints", pred), ("keypoints", gt), ("visibility", gt)],
            "insseg": [("mask_logits", pred), ("masks", gt)]}.get(task, [])
    for name, obj in need:
        if getattr(obj, name, None) is None:
            raise MatchingError(f"task {task!r} needs {name} on {type(obj).__name__}")


def build_cost_matrix(pred, gt: GroundTruthSet, weights: LossWeights, task: str = "detect") -> np.ndarray:
    """[G, N] matching cost between ground truths and query predictions."""
    if task not in ("detect", "pose", "insseg"):
        raise MatchingError(f"unknown task {task!r}")
    _require(pred, gt, task)
    prob = _sigmoid(pred.class_logits)  # [N, classes]
    cost = -weights.cls * prob[:, gt.classes].T
    if task in ("detect", "insseg"):
        pb = np.asarray(pred.boxes, dtype=np.float64)
        l1 = np.abs(gt.boxes[:, None, :] - pb[None]).sum(-1)
        giou = L.pairwise_giou(L.cxcywh_to_xyxy(gt.boxes), L.cxcywh_to_xyxy(pb))
        cost = cost + weights.l1 * l1 + weights.giou * (1.0 - giou)
    if task == "pose":
        kp = np.asarray(pred.keypoints, dtype=np.float64)[..., :2]
        o = L.pairwise_oks(kp, gt.keypoints, gt.visibility, gt.scales)
        cost = cost + weights.oks * (1.0 - o)
    if task == "insseg":
        z = np.asarray(pred.mask_logits, dtype=np.float64)  # [N, Hm, Wm]
        hm, wm = z.shape[1:]
        target = np.stack([L.rasterize_mask(m, hm, wm) for m in gt.masks]).reshape(len(gt), -1)
        zf = z.reshape(len(z), -1)
        npix = zf.shape[1]
        # mean BCE: -(g log p + (1-g) log(1-p)) expanded as a matrix product
        log_p, log_1mp = -np.logaddexp(0, -zf), -np.logaddexp(0, zf)
        bce = -(target @ log_p.T + (1 - target) @ log_1mp.T) / npix
        p = _sigmoid(zf)
        inter = target @ p.T
        dice = 1.0 - (2.0 * inter + L.DICE_EPS) / (target.sum(1)[:, None] + p.sum(1)[None] + L.DICE_EPS)
        cost = cost + weights.mask * bce + weights.dice * dice
    return cost


def match(pred, gt: GroundTruthSet, weights: LossWeights, task: str = "detect") -> MatchAssignment:
    return hungarian(build_cost_matrix(pred, gt, weights, task))
