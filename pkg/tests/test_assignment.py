import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from ecnet.assignment import (
    MatchAssignment,
    MatchingError,
    brute_force_match,
    build_cost_matrix,
    hungarian,
    match,
)
from ecnet.losses import LossWeights
from ecnet.scenes import perfect_predictions, random_predictions, random_scene


def test_square_hand_case():
    cost = [[4, 1, 3], [2, 0, 5], [3, 2, 2]]
    m = hungarian(cost)
    assert m.pairs == ((0, 1), (1, 0), (2, 2))
    assert m.total_cost == 5.0
    assert m.queries == [1, 0, 2]


def test_rectangular_leaves_queries_unmatched():
    cost = np.array([[5.0, 9.0, 1.0, 7.0], [8.0, 2.0, 6.0, 3.0]])
    m = hungarian(cost)
    assert m.pairs == ((0, 2), (1, 1))
    assert m.to_dict() == {"pairs": [[0, 2], [1, 1]], "total_cost": 3.0}


def test_ties_break_lexicographically():
    # every assignment costs the same; the smallest query tuple wins
    m = hungarian(np.ones((3, 5)))
    assert m.pairs == ((0, 0), (1, 1), (2, 2))
    cost = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    assert hungarian(cost).pairs == brute_force_match(cost).pairs == ((0, 0), (1, 1))


def test_empty_and_errors():
    assert hungarian(np.zeros((0, 4))) == MatchAssignment((), 0.0)
    with pytest.raises(MatchingError):
        hungarian(np.zeros((3, 2)))
    with pytest.raises(MatchingError):
        hungarian([[0.0, np.inf]])
    with pytest.raises(MatchingError):
        hungarian(np.zeros(4))
    with pytest.raises(MatchingError):
        brute_force_match(np.zeros((9, 9)))


@pytest.mark.parametrize("shape", [(1, 1), (2, 6), (4, 4), (5, 9), (6, 7)])
def test_agrees_with_brute_force_and_scipy(shape):
    rng = np.random.default_rng(sum(shape))
    for _ in range(30):
        c = rng.normal(size=shape)
        m = hungarian(c)
        assert m.pairs == brute_force_match(c).pairs
        rows, cols = linear_sum_assignment(c)
        assert m.total_cost == pytest.approx(c[rows, cols].sum(), abs=1e-12)


def test_heavily_tied_integer_costs():
    rng = np.random.default_rng(11)
    for _ in range(100):
        c = rng.integers(0, 2, size=(4, 6)).astype(float)
        assert hungarian(c).pairs == brute_force_match(c).pairs


def test_brute_force_enumerates_everything():
    c = np.random.default_rng(5).normal(size=(3, 4))
    best = min(itertools.permutations(range(4), 3), key=lambda p: sum(c[g, q] for g, q in enumerate(p)))
    assert brute_force_match(c).queries == list(best)


@pytest.mark.parametrize("task", ["detect", "pose", "insseg"])
def test_cost_matrix_shape_and_perfect_match(task):
    rng = np.random.default_rng(3)
    n_cls = 1 if task == "pose" else 80
    gt = random_scene(rng, 4, task, num_classes=n_cls, mask_size=(32, 32))
    w = LossWeights.for_task(task)
    noise = random_predictions(rng, 9, task, num_classes=n_cls, mask_size=(16, 16))
    assert build_cost_matrix(noise, gt, w, task).shape == (4, 9)
    # the exact predictions are the best matches for their own ground truths
    assert match(perfect_predictions(gt, n_cls, mask_size=(16, 16)), gt, w, task).queries == [0, 1, 2, 3]


def test_detection_cost_terms():
    gt = random_scene(np.random.default_rng(4), 2, "detect", num_classes=3)
    pred = perfect_predictions(gt, 3)
    only_l1 = LossWeights(cls=0, l1=1, giou=0)
    c = build_cost_matrix(pred, gt, only_l1)
    np.testing.assert_allclose(np.diag(c), 0.0, atol=1e-12)
    assert c[0, 1] == pytest.approx(np.abs(gt.boxes[0] - gt.boxes[1]).sum())


def test_cost_matrix_requires_task_outputs():
    rng = np.random.default_rng(6)
    gt = random_scene(rng, 2, "detect")
    pred = random_predictions(rng, 5, "detect")
    with pytest.raises(MatchingError):
        build_cost_matrix(pred, gt, LossWeights.pose(), "pose")
    with pytest.raises(MatchingError):
        build_cost_matrix(pred, gt, LossWeights.detect(), "caption")
