import itertools
import math

import numpy as np
import pytest

from vloss import losses as L
from vloss import tensor as T
from vloss.tensor import Tensor, backward, finite_difference, max_rel_err


def brute_force_assignment(cost):
    """Exhaustive permutation minimum; independent of the production path."""
    n, m = cost.shape
    best_total, best_pairs = math.inf, None
    k = min(n, m)
    for rows in itertools.combinations(range(n), k):
        for cols in itertools.permutations(range(m), k):
            total = sum(cost[r, c] for r, c in zip(rows, cols))
            if total < best_total - 1e-12:
                best_total = total
    return best_total


class TestHungarian:
    def test_two_by_two(self):
        pairs, total = L.match_hungarian([[1.0, 2.0], [3.0, 1.0]])
        assert pairs == [(0, 0), (1, 1)]
        assert total == 2.0

    def test_single_cell(self):
        pairs, total = L.match_hungarian([[5.0]])
        assert pairs == [(0, 0)] and total == 5.0

    def test_matches_brute_force_on_random(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n, m = rng.integers(1, 7, size=2)
            cost = rng.integers(0, 20, size=(n, m)).astype(float)
            pairs, total = L.match_hungarian(cost)
            assert total == brute_force_assignment(cost)
            assert len(pairs) == min(n, m)
            assert len({q for q, _ in pairs}) == len(pairs)
            assert len({t for _, t in pairs}) == len(pairs)

    def test_lexicographic_tie_break(self):
        pairs, _ = L.match_hungarian(np.ones((3, 3)))
        assert pairs == [(0, 0), (1, 1), (2, 2)]
        pairs, _ = L.match_hungarian(np.zeros((2, 4)))
        assert pairs == [(0, 0), (1, 1)]

    def test_nan_rejected(self):
        with pytest.raises(T.OpError):
            L.match_hungarian([[np.nan]])

    def test_rectangular_more_rows(self):
        cost = np.array([[9.0, 9.0], [0.0, 9.0], [9.0, 0.0]])
        pairs, total = L.match_hungarian(cost)
        assert pairs == [(1, 0), (2, 1)] and total == 0.0


class TestMatchCost:
    def _setup(self):
        rng = np.random.default_rng(3)
        c = rng.standard_normal((4, 3))  # 2 classes + no-object
        z = rng.standard_normal((4, 4, 4))
        targets = L.MatchTargets(labels=[0, 1], masks=(rng.random((2, 4, 4)) > 0.5).astype(int))
        return c, z, targets

    def test_perfect_prediction_cost(self):
        mask = np.zeros((1, 4, 4), dtype=int)
        mask[0, :2, :2] = 1
        targets = L.MatchTargets(labels=[0], masks=mask)
        c = np.array([[50.0, 0.0]])  # prob ~1 on class 0
        z = np.where(mask, 40.0, -40.0)
        cost = L.build_match_cost(c, z, targets, L.LossWeights())
        assert abs(cost[0, 0] + 2.0) < 1e-6  # -lambda_cls + ~0 + ~0

    def test_uniform_predictions_symmetric(self):
        c = np.zeros((3, 3))
        z = np.zeros((3, 4, 4))
        targets = L.MatchTargets(labels=[0, 1], masks=np.ones((2, 4, 4), dtype=int))
        cost = L.build_match_cost(c, z, targets, L.LossWeights())
        np.testing.assert_allclose(cost[:, 0], cost[:, 1])

    def test_weight_scaling_keeps_argmin(self):
        c, z, targets = self._setup()
        base = L.build_match_cost(c, z, targets, L.LossWeights())
        scaled = L.build_match_cost(c, z, targets, L.LossWeights(cls=4.0, bce=10.0, dice=10.0, con=1.0))
        np.testing.assert_allclose(scaled, 2.0 * base, rtol=1e-12)
        assert L.match_hungarian(base)[0] == L.match_hungarian(scaled)[0]

    def test_empty_targets(self):
        c, z, _ = self._setup()
        cost = L.build_match_cost(c, z, L.MatchTargets(labels=[], masks=np.zeros((0, 4, 4))), L.LossWeights())
        assert cost.shape == (4, 0)


class TestClassificationLoss:
    def test_uniform_two_way(self):
        c = Tensor(np.zeros((1, 2)), dtype="f64", requires_grad=True)
        loss = L.classification_loss(c, np.array([0]), "all")
        assert abs(loss.item() - math.log(2)) < 1e-12

    def test_positive_only_empty_is_zero(self):
        c = Tensor(np.random.default_rng(0).standard_normal((4, 3)), dtype="f64")
        y = np.full(4, 2)  # all no-object
        assert L.classification_loss(c, y, "positive_only").item() == 0.0

    def test_positive_only_equals_all_when_fully_matched(self):
        rng = np.random.default_rng(1)
        c = Tensor(rng.standard_normal((5, 4)), dtype="f64")
        y = rng.integers(0, 3, size=5)  # no query gets the no-object index 3
        a = L.classification_loss(c, y, "all").item()
        b = L.classification_loss(c, y, "positive_only").item()
        assert abs(a - b) < 1e-15

    def test_label_out_of_range(self):
        c = Tensor(np.zeros((2, 3)), dtype="f64")
        with pytest.raises(T.OpError):
            L.classification_loss(c, np.array([0, 3]), "all")


class TestMaskLosses:
    def test_bce_zero_logits(self):
        z = Tensor(np.zeros((2, 4)), dtype="f64")
        t = np.array([[0, 1, 0, 1], [1, 1, 0, 0]])
        assert abs(L.bce_mask_loss(z, t).item() - math.log(2)) < 1e-12

    def test_bce_saturated(self):
        t = np.array([[1, 0], [0, 1]])
        z = Tensor(np.where(t, 20.0, -20.0), dtype="f64")
        assert L.bce_mask_loss(z, t).item() < 1e-8

    def test_bce_matches_direct_formula(self):
        rng = np.random.default_rng(5)
        z = rng.standard_normal((4, 4))
        t = (rng.random((4, 4)) > 0.5).astype(int)
        s = 1 / (1 + np.exp(-z))
        direct = -(t * np.log(s) + (1 - t) * np.log(1 - s)).mean()
        got = L.bce_mask_loss(Tensor(z, dtype="f64"), t).item()
        assert abs(got - direct) < 1e-10

    def test_bce_nonbinary_rejected(self):
        with pytest.raises(T.OpError):
            L.bce_mask_loss(Tensor(np.zeros((1, 2)), dtype="f64"), np.array([[0.3, 1.0]]))

    def test_dice_perfect(self):
        t = np.ones((1, 4))
        z = Tensor(np.full((1, 4), 500.0), dtype="f64")
        assert abs(L.dice_loss(z, t).item()) < 1e-9

    def test_dice_all_ones_vs_all_zeros(self):
        t = np.zeros((1, 4))
        z = Tensor(np.full((1, 4), 500.0), dtype="f64")
        assert abs(L.dice_loss(z, t).item() - 0.8) < 1e-9  # 1 - 1/5

    def test_dice_bounded(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            z = Tensor(rng.standard_normal((3, 8)) * 10, dtype="f64")
            t = (rng.random((3, 8)) > 0.5).astype(int)
            v = L.dice_loss(z, t).item()
            assert 0 <= v < 1

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            L.dice_loss(Tensor(np.zeros((1, 4)), dtype="f64"), np.zeros((1, 5)))


class TestContrastive:
    def test_self_similarity(self):
        e = Tensor(np.eye(2), dtype="f64")
        sim = L.contrastive_sim(e, e, tau=1.0)
        np.testing.assert_allclose(np.diag(sim.s.data), [1.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(sim.s.data[0, 1], 0.0, atol=1e-12)

    def test_halving_tau_doubles(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.standard_normal((3, 4)), dtype="f64")
        b = Tensor(rng.standard_normal((3, 4)), dtype="f64")
        s1 = L.contrastive_sim(a, b, tau=1.0).s.data
        s2 = L.contrastive_sim(a, b, tau=0.5).s.data
        np.testing.assert_allclose(s2, 2 * s1, rtol=1e-12)

    def test_zero_norm_rejected(self):
        a = Tensor(np.zeros((1, 3)), dtype="f64")
        with pytest.raises(T.OpError):
            L.contrastive_sim(a, a, tau=1.0)

    def test_b1_loss_zero(self):
        s = Tensor(np.array([[3.7]]), dtype="f64")
        assert L.contrastive_loss(s).item() == 0.0

    def test_b2_orthonormal_value(self):
        s = Tensor(np.eye(2), dtype="f64")
        expect = -math.log(math.e / (math.e + 1))
        assert abs(L.contrastive_loss(s).item() - expect) < 1e-12
        assert abs(L.contrastive_loss(s).item() - 0.31326) < 1e-4

    def test_transpose_invariance(self):
        rng = np.random.default_rng(8)
        s = rng.standard_normal((4, 4))
        a = L.contrastive_loss(Tensor(s, dtype="f64")).item()
        b = L.contrastive_loss(Tensor(s.T, dtype="f64")).item()
        assert abs(a - b) < 1e-12

    def test_non_square_rejected(self):
        with pytest.raises(T.ShapeError):
            L.contrastive_loss(Tensor(np.zeros((2, 3)), dtype="f64"))


class TestFilip:
    def test_reduces_to_clip_when_single_token(self):
        rng = np.random.default_rng(9)
        img = [Tensor(rng.standard_normal((1, 6)), dtype="f64") for _ in range(3)]
        txt = [Tensor(rng.standard_normal((1, 6)), dtype="f64") for _ in range(3)]
        clip = L.contrastive_loss(
            L.contrastive_sim(
                T.concat(img, axis=0), T.concat(txt, axis=0), tau=0.7
            )
        ).item()
        filip = L.filip_contrastive_loss(img, txt, tau=0.7).item()
        assert abs(clip - filip) < 1e-12

    def test_orthonormal_pairs_value(self):
        e = np.eye(2)
        img = [Tensor(e[i : i + 1], dtype="f64") for i in range(2)]
        txt = [Tensor(e[i : i + 1], dtype="f64") for i in range(2)]
        got = L.filip_contrastive_loss(img, txt, tau=1.0).item()
        assert abs(got - (-math.log(math.e / (math.e + 1)))) < 1e-12

    def test_token_permutation_invariant(self):
        rng = np.random.default_rng(10)
        toks = rng.standard_normal((3, 5))
        img1 = [Tensor(toks, dtype="f64"), Tensor(rng.standard_normal((2, 5)), dtype="f64")]
        img2 = [Tensor(toks[::-1].copy(), dtype="f64"), img1[1]]
        txt = [Tensor(rng.standard_normal((2, 5)), dtype="f64") for _ in range(2)]
        a = L.filip_contrastive_loss(img1, txt, tau=1.0).item()
        b = L.filip_contrastive_loss(img2, txt, tau=1.0).item()
        assert abs(a - b) < 1e-12

    def test_empty_tokens_rejected(self):
        with pytest.raises(T.OpError):
            L.filip_contrastive_loss([Tensor(np.zeros((0, 4)), dtype="f64")], [Tensor(np.ones((1, 4)), dtype="f64")], 1.0)


class TestTotalLoss:
    def test_paper_weights_sum(self):
        terms = {k: Tensor(np.asarray(1.0), dtype="f64") for k in ("cls", "bce", "dice", "con")}
        assert L.total_loss(terms, L.LossWeights(), "panoptic").item() == 12.0  # 2+5+5
        terms["con"] = Tensor(np.asarray(1.0), dtype="f64")
        full = 2.0 + 5.0 + 5.0 + 1.0
        got = (
            L.total_loss(terms, L.LossWeights(), "panoptic").item()
            + L.total_loss(terms, L.LossWeights(), "caption").item()
        )
        assert got == full == 13.0

    def test_caption_only_con(self):
        terms = {"con": Tensor(np.asarray(0.5), dtype="f64")}
        assert L.total_loss(terms, L.LossWeights(), "caption").item() == 0.5

    def test_zero_weights(self):
        terms = {k: Tensor(np.asarray(1.0), dtype="f64") for k in ("cls", "bce", "dice")}
        w = L.LossWeights(cls=0.0, bce=0.0, dice=0.0, con=0.0)
        assert L.total_loss(terms, w, "panoptic").item() == 0.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            L.LossWeights(cls=-1.0)


class TestPermutationInvariance:
    def _predictions(self, seed=11):
        rng = np.random.default_rng(seed)
        c = rng.standard_normal((6, 4))
        z = rng.standard_normal((6, 5, 5))
        masks = np.zeros((3, 5, 5), dtype=int)
        for i in range(3):
            masks[i, i : i + 2, i : i + 2] = 1
        targets = L.MatchTargets(labels=[0, 1, 2], masks=masks)
        return c, z, targets

    def _all_losses(self, c, z, targets):
        mr = L.match_queries(c, z, targets, L.LossWeights())
        ct = Tensor(c, dtype="f64")
        zt = Tensor(z, dtype="f64")
        ml = L.gather_rows(zt, [q for q, _ in mr.pairs])
        gt = targets.masks[[t for _, t in mr.pairs]]
        return (
            L.classification_loss(ct, mr.y, "all").item(),
            L.bce_mask_loss(ml, gt).item(),
            L.dice_loss(ml, gt).item(),
        )

    def test_target_order_irrelevant(self):
        c, z, targets = self._predictions()
        base = self._all_losses(c, z, targets)
        perm = [2, 0, 1]
        shuffled = L.MatchTargets(labels=targets.labels[perm], masks=targets.masks[perm])
        assert self._all_losses(c, z, shuffled) == base  # exact: pairs keyed by query

    def test_query_permutation_irrelevant(self):
        c, z, targets = self._predictions()
        base = self._all_losses(c, z, targets)
        perm = np.array([3, 1, 4, 0, 5, 2])
        got = self._all_losses(c[perm], z[perm], targets)
        for a, b in zip(base, got):
            assert abs(a - b) < 1e-12


class TestLossGradients:
    def test_dice_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        z = rng.standard_normal((2, 8, 8))
        t = (rng.random((2, 8, 8)) > 0.5).astype(int)

        zt = Tensor(z, dtype="f64", requires_grad=True)
        loss = L.dice_loss(zt, t)
        backward(loss)

        numeric = finite_difference(lambda arrs: L.dice_loss(Tensor(arrs[0], "f64"), t), [z.copy()])[0]
        assert max_rel_err(zt.grad, numeric) < 1e-4

    def test_bce_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        z = rng.standard_normal((2, 6)) + 0.3
        t = (rng.random((2, 6)) > 0.5).astype(int)
        zt = Tensor(z, dtype="f64", requires_grad=True)
        backward(L.bce_mask_loss(zt, t))
        numeric = finite_difference(lambda arrs: L.bce_mask_loss(Tensor(arrs[0], "f64"), t), [z.copy()])[0]
        assert max_rel_err(zt.grad, numeric) < 1e-4

    def test_contrastive_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        a, b = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))

        def run(arrs):
            sim = L.contrastive_sim(Tensor(arrs[0], "f64"), Tensor(arrs[1], "f64"), tau=0.5)
            return L.contrastive_loss(sim)

        at = Tensor(a, dtype="f64", requires_grad=True)
        bt = Tensor(b, dtype="f64", requires_grad=True)
        backward(L.contrastive_loss(L.contrastive_sim(at, bt, tau=0.5)))
        na, nb = finite_difference(run, [a.copy(), b.copy()])
        assert max_rel_err(at.grad, na) < 1e-4
        assert max_rel_err(bt.grad, nb) < 1e-4

    def test_classification_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        c = rng.standard_normal((4, 3))
        y = np.array([0, 1, 2, 2])
        ct = Tensor(c, dtype="f64", requires_grad=True)
        backward(L.classification_loss(ct, y, "positive_only"))
        numeric = finite_difference(
            lambda arrs: L.classification_loss(Tensor(arrs[0], "f64"), y, "positive_only"), [c.copy()]
        )[0]
        assert max_rel_err(ct.grad, numeric) < 1e-4
