import itertools
import math
import time
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from setner import autodiff as ad
from setner import matching
from setner.data import Entity
from setner.matching import (
    Assignment,
    MatchingError,
    bipartite_loss,
    ce_loss_baseline,
    cost_matrix,
    hungarian,
    match_cost,
    pad_gold,
    set_loss,
)
from conftest import finite_diff, rel_err


@dataclass
class FakePrediction:
    """Bare distributions standing in for a decoder output."""

    p_class: ad.Tensor
    p_left: ad.Tensor
    p_right: ad.Tensor
    length: int


def uniform_prediction(n, n_cats_plus_null, length):
    return FakePrediction(
        ad.tensor(np.full((n, n_cats_plus_null), 1.0 / n_cats_plus_null)),
        ad.tensor(np.full((n, length), 1.0 / length)),
        ad.tensor(np.full((n, length), 1.0 / length)),
        length,
    )


def random_prediction(rng, n, n_cats_plus_null, length, requires_grad=False):
    def dist(cols):
        logits = rng.standard_normal((n, cols))
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return ad.tensor(e / e.sum(axis=1, keepdims=True), requires_grad=requires_grad)

    return FakePrediction(dist(n_cats_plus_null), dist(length), dist(length), length)


def brute_force_min(cost):
    n = cost.shape[0]
    best = math.inf
    for perm in itertools.permutations(range(n)):
        total = sum(cost[i, perm[i]] for i in range(n))
        best = min(best, total)
    return best


class TestMatchCost:
    def test_null_target_is_zero(self):
        pred = uniform_prediction(4, 4, 3)
        assert match_cost(None, pred, 2) == 0.0

    def test_perfect_prediction_is_minus_three(self):
        pred = uniform_prediction(2, 4, 3)
        pred.p_class.data[1] = [0.0, 1.0, 0.0, 0.0]
        pred.p_left.data[1] = [1.0, 0.0, 0.0]
        pred.p_right.data[1] = [0.0, 0.0, 1.0]
        assert match_cost(Entity(0, 2, 1), pred, 1) == -3.0

    def test_uniform_case(self):
        # C=3 real categories (+null), length 4: cost = -(3/4) per slot
        pred = uniform_prediction(5, 4, 4)
        assert match_cost(Entity(0, 1, 2), pred, 0) == pytest.approx(-0.75)

    def test_out_of_range_boundary(self):
        pred = uniform_prediction(2, 4, 3)
        with pytest.raises(MatchingError):
            match_cost(Entity(0, 3, 1), pred, 0)

    def test_cost_matrix_rows(self):
        rng = np.random.default_rng(0)
        pred = random_prediction(rng, 6, 4, 5)
        padded = pad_gold([Entity(0, 1, 0), Entity(2, 4, 2)], 6)
        cost = cost_matrix(padded, pred)
        assert np.all(cost[2:] == 0.0)
        assert np.all(cost[:2] >= -3.0) and np.all(cost[:2] < 0.0)

    def test_monotone_in_matched_probability(self):
        rng = np.random.default_rng(1)
        pred = random_prediction(rng, 3, 4, 4)
        target = Entity(1, 2, 0)
        before = match_cost(target, pred, 0)
        pred.p_class.data[0, 0] += 0.05
        assert match_cost(target, pred, 0) < before


class TestHungarian:
    def test_two_by_two(self):
        out = hungarian(np.array([[1.0, 2.0], [2.0, 4.0]]))
        assert list(out.perm) == [1, 0]
        assert out.total_cost == 4.0

    def test_dominant_diagonal(self):
        cost = np.ones((5, 5)) - np.eye(5)
        out = hungarian(cost)
        assert list(out.perm) == list(range(5))
        assert out.total_cost == 0.0

    def test_rejects_non_square(self):
        with pytest.raises(MatchingError):
            hungarian(np.zeros((2, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(MatchingError):
            hungarian(np.array([[np.inf, 0.0], [0.0, 1.0]]))

    def test_thousand_random_matrices_match_brute_force(self):
        rng = np.random.default_rng(987)
        start = time.monotonic()
        for trial in range(1000):
            n = 2 + trial % 6  # sizes 2..7
            cost = rng.standard_normal((n, n))
            out = hungarian(cost)
            assert sorted(out.perm) == list(range(n))
            assert out.total_cost == pytest.approx(brute_force_min(cost), abs=1e-9)
        assert time.monotonic() - start < 10.0

    @given(st.integers(min_value=2, max_value=5), st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=60, deadline=None)
    def test_property_optimal(self, n, seed):
        cost = np.random.default_rng(seed).uniform(-3, 0, size=(n, n))
        out = hungarian(cost)
        assert out.total_cost <= brute_force_min(cost) + 1e-12

    def test_zero_rows_map_ascending(self):
        cost = np.zeros((5, 5))
        cost[1, :] = [-1.0, -5.0, -2.0, -1.5, -0.5]
        cost[3, :] = [-2.0, -1.0, -6.0, -1.0, -0.2]
        out = hungarian(cost)
        assert out.perm[1] == 1 and out.perm[3] == 2
        # zero rows 0, 2, 4 take the remaining columns 0, 3, 4 in order
        assert list(out.perm[[0, 2, 4]]) == [0, 3, 4]


class TestSetLoss:
    def test_perfect_predictions_give_zero_loss(self):
        pred = uniform_prediction(3, 3, 2)
        gold = [Entity(0, 1, 0)]
        pred.p_class.data[:] = [[0, 0, 1.0], [0, 0, 1.0], [1.0, 0, 0]]
        pred.p_left.data[2] = [1.0, 0.0]
        pred.p_right.data[2] = [0.0, 1.0]
        loss, _ = bipartite_loss(gold, pred, null_id=2)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_empty_gold_uniform_class_gives_n_log_c1(self):
        n, c1 = 6, 4
        pred = uniform_prediction(n, c1, 3)
        loss, _ = bipartite_loss([], pred, null_id=3)
        assert loss.item() == pytest.approx(n * math.log(c1), rel=1e-9)

    def test_permutation_of_gold_is_bitwise_invariant(self):
        rng = np.random.default_rng(5)
        for trial in range(200):
            length = int(rng.integers(2, 7))
            n = int(rng.integers(10, 14))
            g = int(rng.integers(0, min(10, n)))
            gold = set()
            while len(gold) < g:
                left = int(rng.integers(0, length))
                right = int(rng.integers(left, length))
                gold.add(Entity(left, right, int(rng.integers(0, 3))))
            gold = list(gold)
            pred = random_prediction(rng, n, 4, length)
            base, _ = bipartite_loss(gold, pred, null_id=3)
            perm_order = list(rng.permutation(len(gold)))
            shuffled = [gold[i] for i in perm_order]
            other, _ = bipartite_loss(shuffled, pred, null_id=3)
            assert base.item() == other.item()

    def test_gradient_matches_finite_differences_with_frozen_assignment(self):
        rng = np.random.default_rng(9)
        n, c1, length = 5, 4, 3
        gold = [Entity(0, 1, 1), Entity(2, 2, 0)]
        logits = {
            "c": rng.standard_normal((n, c1)),
            "l": rng.standard_normal((n, length)),
            "r": rng.standard_normal((n, length)),
        }

        def build(lc, ll, lr):
            pred = FakePrediction(
                ad.softmax(lc, axis=1), ad.softmax(ll, axis=1), ad.softmax(lr, axis=1), length
            )
            padded = pad_gold(gold, n)
            assignment = hungarian(cost_matrix(padded, pred))
            return pred, padded, assignment

        tc = ad.tensor(logits["c"], requires_grad=True)
        tl = ad.tensor(logits["l"], requires_grad=True)
        tr = ad.tensor(logits["r"], requires_grad=True)
        pred, padded, frozen = build(tc, tl, tr)
        loss = set_loss(padded, pred, frozen, null_id=3)
        loss.backward()
        analytic = [tc.grad.copy(), tl.grad.copy(), tr.grad.copy()]

        def value():
            c = ad.tensor(logits["c"])
            l = ad.tensor(logits["l"])
            r = ad.tensor(logits["r"])
            pred2 = FakePrediction(
                ad.softmax(c, axis=1), ad.softmax(l, axis=1), ad.softmax(r, axis=1), length
            )
            return set_loss(pad_gold(gold, n), pred2, frozen, null_id=3).item()

        numeric = finite_diff(value, [logits["c"], logits["l"], logits["r"]])
        for a, b in zip(analytic, numeric):
            assert rel_err(a, b) < 1e-4

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(12)
        pred = random_prediction(rng, 8, 4, 5)
        loss, _ = bipartite_loss([Entity(1, 3, 2)], pred, null_id=3)
        assert loss.item() >= 0.0

    def test_too_many_gold_entities(self):
        pred = uniform_prediction(2, 4, 5)
        gold = [Entity(0, 0, 0), Entity(1, 1, 0), Entity(2, 2, 0)]
        with pytest.raises(MatchingError):
            bipartite_loss(gold, pred, null_id=3)


class TestCeBaseline:
    def test_empty_gold_equals_set_loss(self):
        pred = uniform_prediction(4, 4, 3)
        bi, _ = bipartite_loss([], pred, null_id=3)
        ce = ce_loss_baseline([], pred, null_id=3)
        assert bi.item() == ce.item()

    def test_order_sensitivity(self):
        # craft predictions aligned with one specific gold order
        pred = uniform_prediction(2, 3, 2)
        pred.p_class.data[:] = [[0.9, 0.05, 0.05], [0.05, 0.9, 0.05]]
        a, b = Entity(0, 0, 0), Entity(1, 1, 1)
        first = ce_loss_baseline([a, b], pred, null_id=2).item()
        second = ce_loss_baseline([b, a], pred, null_id=2).item()
        assert first != second

    def test_perfect_in_matching_order_gives_zero(self):
        pred = uniform_prediction(2, 3, 2)
        pred.p_class.data[:] = [[1.0, 0, 0], [0, 1.0, 0]]
        pred.p_left.data[:] = [[1.0, 0], [0, 1.0]]
        pred.p_right.data[:] = [[1.0, 0], [0, 1.0]]
        gold = [Entity(0, 0, 0), Entity(1, 1, 1)]
        assert ce_loss_baseline(gold, pred, null_id=2).item() == pytest.approx(0.0, abs=1e-9)
