import math

import numpy as np
import pytest

from fdcheck import REL_TOL, central_diff, max_rel_err
from owislab.losses import (
    DICE_SMOOTH,
    LossBreakdown,
    LossWeights,
    bce,
    consistency_loss,
    dice,
    foreground_loss,
    mask_loss,
    objectness_loss,
    total_loss,
)
from owislab.masks import (
    SOFT_UNION_SIGMOID_OF_LOGITS,
    BinaryMask,
    SoftMask,
    soft_union_estimate,
)
from owislab.matching import MatchResult
from owislab.model import PredictionSet

LN2 = math.log(2.0)


def soft(arr):
    return SoftMask(np.asarray(arr, dtype=np.float64))


def binary(arr):
    return BinaryMask(np.asarray(arr, dtype=np.uint8))


def random_soft(rng, h=8, w=8):
    # interior values keep the clamp inactive so FD sees a smooth function
    return SoftMask(rng.uniform(0.02, 0.98, size=(h, w)))


def random_binary(rng, h=8, w=8):
    return BinaryMask(rng.integers(0, 2, size=(h, w)).astype(np.uint8))


class TestBce:
    def test_uniform_half_gives_ln2(self):
        rng = np.random.default_rng(0)
        target = random_binary(rng)
        value, _ = bce(soft(np.full((8, 8), 0.5)), target)
        assert value == pytest.approx(LN2, abs=1e-12)

    def test_identity_is_near_zero(self):
        rng = np.random.default_rng(1)
        t = random_binary(rng)
        value, _ = bce(soft(t.data.astype(float)), t)
        assert 0.0 <= value <= 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            bce(soft([[0.5]]), binary([[1, 0]]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            pred = random_soft(rng)
            target = random_soft(rng)
            _, grad = bce(pred, target)
            fd = central_diff(lambda x: bce(soft(x.reshape(8, 8)), target)[0], pred.data.ravel())
            assert max_rel_err(grad.ravel(), fd) <= REL_TOL


class TestDice:
    def test_identity_all_ones(self):
        m = np.ones((4, 4))
        value, _ = dice(soft(m), soft(m))
        assert value == pytest.approx(0.0, abs=0)

    def test_all_one_vs_all_zero_closed_form(self):
        value, _ = dice(soft(np.ones((4, 4))), soft(np.zeros((4, 4))))
        assert value == pytest.approx(1.0 - 1.0 / 17.0, abs=1e-15)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            pred = random_soft(rng)
            target = random_soft(rng)
            _, grad = dice(pred, target)
            fd = central_diff(lambda x: dice(soft(x.reshape(8, 8)), target)[0], pred.data.ravel())
            assert max_rel_err(grad.ravel(), fd) <= REL_TOL

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        pred, target = random_soft(rng), random_soft(rng)
        base, _ = dice(pred, target)
        perm = rng.permutation(64)
        value, _ = dice(
            soft(pred.data.ravel()[perm].reshape(8, 8)),
            soft(target.data.ravel()[perm].reshape(8, 8)),
        )
        assert value == pytest.approx(base, rel=1e-12)

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            pred, target = random_soft(rng), random_soft(rng)
            assert dice(pred, target)[0] >= 0.0
            assert bce(pred, target)[0] >= 0.0


class TestConsistencyLoss:
    def test_zero_masks_and_half_foreground_closed_form(self):
        masks = [soft(np.zeros((4, 4)))]
        fg = soft(np.full((4, 4), 0.5))
        value, _, _ = consistency_loss(masks, fg)
        # soft union of an all-zero mask is uniformly 0.5, so BCE(0.5, 0.5) = ln 2
        # and dice(0.5, 0.5) = 1 - (0.5*P + 1) / (P + 1)
        n_pix = 16
        expected_dice = 1.0 - (0.5 * n_pix + 1.0) / (n_pix + 1.0)
        assert value == pytest.approx(LN2 + expected_dice, rel=1e-12)

    def test_near_stationary_at_matched_saturated_union(self):
        # 40 saturated masks drive the union to exactly 1.0; with F equal to it,
        # the BCE block of the foreground gradient vanishes identically and the
        # dice block is pinned at the known boundary value 1/(sum p + sum t + s).
        masks = [soft(np.ones((8, 8)))] * 40
        ghat = soft_union_estimate(masks)
        assert np.all(ghat.data == 1.0)
        value, _, grad_fg = consistency_loss(masks, ghat)
        assert value <= 2e-7  # BCE clamp floor; dice term is exactly zero
        bound = 1.0 / (2.0 * 64.0 + DICE_SMOOTH)
        assert np.max(np.abs(grad_fg)) <= bound + 1e-12
        _, grad_bce = bce(ghat, ghat)
        assert np.all(grad_bce == 0.0)

    def test_empty_mask_list_rejected(self):
        with pytest.raises(ValueError):
            consistency_loss([], soft(np.full((2, 2), 0.5)))

    @pytest.mark.parametrize("mode", ["sigmoid_of_confidences", "sigmoid_of_logits"])
    def test_gradients_match_finite_differences(self, mode):
        rng = np.random.default_rng(6)
        for _ in range(50):
            masks = [random_soft(rng, 4, 4) for _ in range(3)]
            fg = random_soft(rng, 4, 4)
            _, grad_masks, grad_fg = consistency_loss(masks, fg, mode=mode)

            def value_of_fg(x):
                return consistency_loss(masks, soft(x.reshape(4, 4)), mode=mode)[0]

            fd_fg = central_diff(value_of_fg, fg.data.ravel())
            assert max_rel_err(grad_fg.ravel(), fd_fg) <= REL_TOL

            for j in range(3):
                def value_of_mask(x, j=j):
                    swapped = list(masks)
                    swapped[j] = soft(x.reshape(4, 4))
                    return consistency_loss(swapped, fg, mode=mode)[0]

                fd_m = central_diff(value_of_mask, masks[j].data.ravel())
                assert max_rel_err(grad_masks[j].ravel(), fd_m) <= REL_TOL

    def test_stop_gradient_switches(self):
        rng = np.random.default_rng(7)
        masks = [random_soft(rng, 4, 4) for _ in range(2)]
        fg = random_soft(rng, 4, 4)
        _, gm, gf = consistency_loss(masks, fg, stop_gradient="through_Ghat")
        assert np.all(gm == 0.0) and np.any(gf != 0.0)
        _, gm, gf = consistency_loss(masks, fg, stop_gradient="through_F")
        assert np.any(gm != 0.0) and np.all(gf == 0.0)


class TestMaskLoss:
    def test_perfect_pair_near_zero(self):
        rng = np.random.default_rng(8)
        gt = random_binary(rng)
        value, _ = mask_loss([(soft(gt.data.astype(float)), gt)])
        assert 0.0 <= value <= 1e-6

    def test_empty_pairs(self):
        value, grads = mask_loss([])
        assert value == 0.0 and grads == []

    def test_two_pairs_average_independent_recompute(self):
        rng = np.random.default_rng(9)
        pairs = [(random_soft(rng), random_binary(rng)) for _ in range(2)]
        value, _ = mask_loss(pairs)
        expected = sum(bce(p, g)[0] + dice(p, g)[0] for p, g in pairs) / 2.0
        assert value == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            preds = [random_soft(rng, 4, 4) for _ in range(2)]
            gts = [random_binary(rng, 4, 4) for _ in range(2)]
            _, grads = mask_loss(list(zip(preds, gts)))
            for j in range(2):
                def value_of(x, j=j):
                    swapped = list(preds)
                    swapped[j] = soft(x.reshape(4, 4))
                    return mask_loss(list(zip(swapped, gts)))[0]

                fd = central_diff(value_of, preds[j].data.ravel())
                assert max_rel_err(grads[j].ravel(), fd) <= REL_TOL


class TestForegroundLoss:
    def test_identity_near_zero(self):
        rng = np.random.default_rng(11)
        g = random_binary(rng)
        value, _ = foreground_loss(soft(g.data.astype(float)), g)
        assert 0.0 <= value <= 1e-6

    def test_uniform_half_closed_form(self):
        rng = np.random.default_rng(12)
        g = random_binary(rng)
        value, _ = foreground_loss(soft(np.full((8, 8), 0.5)), g)
        n_pix, st = 64.0, float(g.data.sum())
        expected_dice = 1.0 - (2.0 * 0.5 * st + 1.0) / (0.5 * n_pix + st + 1.0)
        assert value == pytest.approx(LN2 + expected_dice, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            fg = random_soft(rng)
            g = random_binary(rng)
            _, grad = foreground_loss(fg, g)
            fd = central_diff(lambda x: foreground_loss(soft(x.reshape(8, 8)), g)[0], fg.data.ravel())
            assert max_rel_err(grad.ravel(), fd) <= REL_TOL


class TestObjectnessLoss:
    def test_identity_near_zero(self):
        v = np.array([1.0, 0.0, 1.0, 0.0])
        value, _ = objectness_loss(v, v)
        assert 0.0 <= value <= 1e-6

    def test_uniform_half(self):
        value, _ = objectness_loss(np.full(6, 0.5), np.array([1, 0, 1, 1, 0, 0]))
        assert value == pytest.approx(LN2, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            objectness_loss(np.zeros(3), np.zeros(4))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            scores = rng.uniform(0.02, 0.98, size=10)
            v = rng.integers(0, 2, size=10).astype(float)
            _, grad = objectness_loss(scores, v)
            fd = central_diff(lambda x: objectness_loss(x, v)[0], scores)
            assert max_rel_err(grad, fd) <= REL_TOL


def make_prediction(rng, n=4, h=8, w=8):
    return PredictionSet(
        rng.uniform(0.02, 0.98, size=(n, h, w)),
        rng.uniform(0.02, 0.98, size=n),
        rng.uniform(0.02, 0.98, size=(h, w)),
    )


class TestTotalLoss:
    def test_unlabeled_is_weighted_consistency_only(self):
        rng = np.random.default_rng(15)
        pred = make_prediction(rng)
        weights = LossWeights()
        out = total_loss(pred, None, None, None, weights, labeled=False)
        c_val, c_gm, c_gf = consistency_loss(
            [SoftMask(m) for m in pred.masks], SoftMask(pred.foreground)
        )
        assert out.total == weights.gamma * c_val
        assert out.mask_loss == 0.0 and out.foreground_loss == 0.0 and out.objectness_loss == 0.0
        assert np.allclose(out.grad_masks, weights.gamma * c_gm, rtol=1e-12, atol=0)
        assert np.allclose(out.grad_foreground, weights.gamma * c_gf, rtol=1e-12, atol=0)
        assert np.all(out.grad_scores == 0.0)

    def test_zero_weights_zero_everything(self):
        rng = np.random.default_rng(16)
        pred = make_prediction(rng)
        gts = [random_binary(rng) for _ in range(2)]
        m = MatchResult(((0, 0), (1, 1)), np.array([1, 1, 0, 0], dtype=np.uint8))
        g = binary(np.maximum(gts[0].data, gts[1].data))
        out = total_loss(pred, m, gts, g, LossWeights(0, 0, 0, 0), labeled=True)
        assert out.total == 0.0
        assert np.all(out.grad_masks == 0.0)
        assert np.all(out.grad_scores == 0.0)
        assert np.all(out.grad_foreground == 0.0)

    def test_labeled_recombines_independent_terms(self):
        rng = np.random.default_rng(17)
        pred = make_prediction(rng)
        gts = [random_binary(rng) for _ in range(2)]
        m = MatchResult(((2, 0), (0, 1)), np.array([1, 0, 1, 0], dtype=np.uint8))
        g = binary(np.maximum(gts[0].data, gts[1].data))
        weights = LossWeights()
        out = total_loss(pred, m, gts, g, weights, labeled=True)

        lm, _ = mask_loss([(pred.mask(2), gts[0]), (pred.mask(0), gts[1])])
        lp, _ = foreground_loss(pred.foreground_mask(), g)
        lc, _, _ = consistency_loss([SoftMask(x) for x in pred.masks], pred.foreground_mask())
        lo, _ = objectness_loss(pred.scores, m.indicators)
        expected = 5.0 * lm + 1.0 * lp + 1.0 * lc + 2.0 * lo
        assert out.mask_loss == pytest.approx(lm, rel=1e-12)
        assert out.foreground_loss == pytest.approx(lp, rel=1e-12)
        assert out.consistency_loss == pytest.approx(lc, rel=1e-12)
        assert out.objectness_loss == pytest.approx(lo, rel=1e-12)
        assert out.total == pytest.approx(expected, rel=1e-12)

    def test_labeled_requires_ground_truth(self):
        rng = np.random.default_rng(18)
        pred = make_prediction(rng)
        with pytest.raises(ValueError):
            total_loss(pred, None, None, None, LossWeights(), labeled=True)

    @pytest.mark.parametrize("mode", ["sigmoid_of_confidences", "sigmoid_of_logits"])
    def test_logit_mode_consistency_flows_through(self, mode):
        rng = np.random.default_rng(19)
        pred = make_prediction(rng)
        out = total_loss(pred, None, None, None, LossWeights(), labeled=False, soft_union_mode=mode)
        assert np.isfinite(out.total)
        assert np.any(out.grad_masks != 0.0)


class TestWeightTypes:
    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-1.0)

    def test_breakdown_requires_finite_gradient(self):
        with pytest.raises(ValueError):
            LossBreakdown(0, 0, 0, 0, 0, np.array([np.inf]))
