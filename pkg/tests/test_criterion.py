import itertools

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import oracles
from mbdetr.criterion import (
    LossWeights,
    MatchResult,
    giou,
    giou_matrix,
    hungarian,
    layer_loss,
    matching_cost,
    set_loss,
)
from mbdetr.numerics import grad_check, softmax


def boxes(n, seed):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.05, 0.3, (n, 2))]))


# -- GIoU ------------------------------------------------------------------


def test_giou_identical_is_one():
    assert giou((0.3, 0.4, 0.2, 0.1), (0.3, 0.4, 0.2, 0.1)) == pytest.approx(1.0, abs=1e-15)


def test_giou_far_apart_tends_to_minus_one():
    values = [giou((0, 0, 1, 1), (d, 0, 1, 1)) for d in (2, 10, 100, 1e4)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] == pytest.approx(-1.0, abs=1e-3)


def test_giou_hand_example():
    # overlap 0.1 x 0.2 of two 0.2 x 0.2 boxes, hull 0.3 x 0.2 equals the union
    assert giou((0.5, 0.5, 0.2, 0.2), (0.6, 0.5, 0.2, 0.2)) == pytest.approx(1 / 3, abs=1e-12)


def test_giou_rejects_degenerate_boxes():
    with pytest.raises(ValueError):
        giou((0.5, 0.5, 0.0, 0.1), (0.5, 0.5, 0.1, 0.1))
    with pytest.raises(ValueError):
        giou((0.5, 0.5, 0.1, 0.1), (0.5, 0.5, 0.1, -0.2))


def test_giou_matches_raster_oracle():
    rng = np.random.default_rng(0)
    for _ in range(15):
        a = (*rng.uniform(0, 1, 2), *rng.uniform(0.1, 0.6, 2))
        b = (*rng.uniform(0, 1, 2), *rng.uniform(0.1, 0.6, 2))
        assert giou(a, b) == pytest.approx(oracles.raster_giou(a, b, n=3000), abs=1e-3)


@given(st.integers(0, 10_000))
def test_giou_is_symmetric_and_bounded(seed):
    a, b = boxes(5, seed), boxes(5, seed + 1)
    m = giou_matrix(a, b)
    assert torch.allclose(m, giou_matrix(b, a).T, atol=1e-15)
    assert torch.all((m > -1) & (m <= 1))


# -- matching cost ---------------------------------------------------------


def test_perfect_prediction_cost_is_minus_lambda_cls():
    gt = boxes(1, 1)
    probs = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    assert matching_cost(probs, gt, gt)[0, 0] == pytest.approx(-1.0, abs=1e-12)


def test_cost_hand_example():
    probs = torch.tensor([[0.3, 0.7]], dtype=torch.float64)
    pred = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)
    gt = torch.tensor([[0.6, 0.5, 0.2, 0.2]], dtype=torch.float64)
    # -0.3 + 5 * 0.1 + 2 * (1 - 1/3)
    assert matching_cost(probs, pred, gt)[0, 0] == pytest.approx(-0.3 + 0.5 + 4 / 3, abs=1e-12)


def test_cost_matches_formula():
    w = LossWeights(cls=1.5, l1=4.0, giou=3.0)
    pred, gt = boxes(6, 2), boxes(3, 3)
    p = softmax(torch.from_numpy(np.random.default_rng(4).normal(size=(6, 2))), axis=-1)
    cost = matching_cost(p, pred, gt, w)
    for q in range(6):
        for g in range(3):
            l1 = sum(abs(float(pred[q, k] - gt[g, k])) for k in range(4))
            expected = -1.5 * float(p[q, 0]) + 4.0 * l1 + 3.0 * (1 - oracles.raster_giou(pred[q].tolist(), gt[g].tolist(), 3000))
            assert cost[q, g] == pytest.approx(expected, abs=3e-3)


# -- Hungarian -------------------------------------------------------------


def test_identity_cost():
    m = hungarian(1 - np.eye(5))
    assert m.assignment.tolist() == list(range(5)) and m.total_cost == 0.0


def test_single_column_picks_minimum():
    c = np.array([[3.0], [1.0], [2.0], [5.0]])
    m = hungarian(c)
    assert m.assignment.tolist() == [1] and m.total_cost == 1.0


def test_no_ground_truth():
    m = hungarian(np.zeros((4, 0)))
    assert m.assignment.size == 0 and m.total_cost == 0.0


def test_more_columns_than_rows_is_rejected():
    with pytest.raises(ValueError):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        hungarian(np.array([[np.nan]]))


@pytest.mark.parametrize("kind", ["float", "int"])
def test_hungarian_equals_brute_force(kind):
    rng = np.random.default_rng(5 if kind == "float" else 6)
    for _ in range(200):
        ngt = int(rng.integers(1, 6))
        nq = int(rng.integers(ngt, 8))
        c = rng.normal(size=(nq, ngt)) if kind == "float" else rng.integers(-3, 4, size=(nq, ngt)).astype(float)
        m = hungarian(c)
        assert len(set(m.assignment.tolist())) == ngt
        assert m.total_cost == sum(c[m.assignment[g], g] for g in range(ngt))
        assert m.total_cost == oracles.brute_force_assignment(c.tolist())


@given(st.integers(0, 10_000), st.floats(-10, 10))
def test_uniform_shift_keeps_assignment(seed, shift):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(6, 4))
    a = hungarian(c)
    b = hungarian(c + shift)
    assert np.array_equal(a.assignment, b.assignment)
    assert b.total_cost == pytest.approx(a.total_cost + 4 * shift, abs=1e-9)


# -- set loss --------------------------------------------------------------


def _preds(layers, nq, seed):
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.normal(size=(layers, nq, 2)))
    raw = torch.from_numpy(rng.normal(size=(layers, nq, 4)))
    return logits, torch.sigmoid(raw) * 0.6 + 0.2


def test_no_ground_truth_confident_no_object_loss_vanishes():
    logits = torch.tensor([[[-30.0, 30.0]] * 5], dtype=torch.float64)
    loss, matches = set_loss(logits, torch.full((1, 5, 4), 0.5, dtype=torch.float64), torch.zeros(0, 4))
    assert float(loss) < 1e-20 and matches[0].assignment.size == 0


def test_loss_matches_hand_assembled_value():
    logits, bx = _preds(1, 4, 7)
    gt = boxes(2, 8)
    loss, (m,) = set_loss(logits, bx, gt)
    q = m.assignment
    p = softmax(logits[0], axis=-1)
    w = np.full(4, 0.1)
    w[q] = 1.0
    nll = np.array([-np.log(float(p[i, 0])) if i in q else -np.log(float(p[i, 1])) for i in range(4)])
    ce = (w * nll).sum() / w.sum()
    l1 = sum(float((bx[0, q[g]] - gt[g]).abs().sum()) for g in range(2)) / 2
    gl = sum(1 - giou(bx[0, q[g]].tolist(), gt[g].tolist()) for g in range(2)) / 2
    assert float(loss) == pytest.approx(ce + 5 * l1 + 2 * gl, abs=1e-12)


def test_loss_averages_layers():
    logits, bx = _preds(3, 5, 9)
    gt = boxes(3, 10)
    total, _ = set_loss(logits, bx, gt)
    per = [float(layer_loss(logits[k], bx[k], gt, LossWeights())[0]) for k in range(3)]
    assert float(total) == pytest.approx(sum(per) / 3, abs=1e-12)


@given(st.integers(0, 10_000))
def test_loss_is_invariant_to_gt_order(seed):
    logits, bx = _preds(2, 6, seed)
    gt = boxes(4, seed + 1)
    base, _ = set_loss(logits, bx, gt)
    for perm in itertools.islice(itertools.permutations(range(4)), 0, 24, 5):
        shuffled, _ = set_loss(logits, bx, gt[list(perm)])
        assert abs(float(shuffled) - float(base)) < 1e-12


def test_box_terms_are_non_negative():
    logits, bx = _preds(1, 5, 11)
    _, _, parts = layer_loss(logits[0], bx[0], boxes(3, 12), LossWeights())
    assert parts["l1"] >= 0 and parts["giou"] >= 0 and parts["ce"] >= 0


def test_loss_grad_check_at_fixed_assignment():
    logits, bx = _preds(2, 5, 13)
    gt = boxes(3, 14)
    _, matches = set_loss(logits, bx, gt)

    def f(t):
        return set_loss(t[0], t[1], gt, matches=matches)[0]

    assert grad_check(f, [logits.clone(), bx.clone()]) < 1e-6


def test_match_result_total_is_sum_of_entries():
    c = np.random.default_rng(15).normal(size=(7, 4))
    m = hungarian(c)
    assert isinstance(m, MatchResult)
    assert m.total_cost == sum(c[q, g] for g, q in enumerate(m.assignment))
