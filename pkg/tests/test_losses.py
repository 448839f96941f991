import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nodule3d import losses as L
from nodule3d.anchors import anchor_grid
from nodule3d.gradcheck import grad_check
from nodule3d.tensor import Parameter


class TestFocal:
    def test_reduces_to_cross_entropy(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.01, 0.99, 1000)
        pos = rng.random(1000) < 0.5
        pt = np.where(pos, p, 1 - p)
        got = L.focal_loss(p, pos, L.FocalParams(0.0, 1.0))
        np.testing.assert_allclose(got, -np.log(pt), rtol=0, atol=1e-12)

    def test_reference_value(self):
        # 0.5 * 0.1^2 * -ln(0.9)
        expected = 0.5 * 0.01 * -math.log(0.9)
        got = L.focal_loss(0.9, True, L.FocalParams(2.0, 0.5))
        assert abs(got - expected) < 1e-15
        assert abs(got - 5.268e-4) < 1e-7

    def test_well_classified_limit(self):
        assert L.focal_loss(1.0, True) < 1e-15

    @given(st.floats(0.01, 0.98), st.floats(0.0, 5.0))
    def test_monotone_and_downweighted(self, pt, gamma):
        fp = L.FocalParams(gamma, 0.5)
        assert L.focal_loss(pt + 0.01, True, fp) < L.focal_loss(pt, True, fp)
        assert L.focal_loss(pt, True, fp) <= L.focal_loss(pt, True, L.FocalParams(0.0, 0.5)) + 1e-15

    def test_params_validated(self):
        with pytest.raises(ValueError):
            L.FocalParams(-1, 0.5)
        with pytest.raises(ValueError):
            L.FocalParams(1, 1.5)

    @pytest.mark.parametrize("gamma,alpha", [(2.0, 0.5), (0.0, 1.0)])
    def test_logit_form_matches_and_grads(self, gamma, alpha):
        rng = np.random.default_rng(1)
        z = Parameter(rng.uniform(-4, 4, 30), dtype=np.float64)
        pos = rng.random(30) < 0.5
        fp = L.FocalParams(gamma, alpha)
        out = L.focal_loss_logits(z, pos, fp)
        np.testing.assert_allclose(out.data, L.focal_loss(1 / (1 + np.exp(-z.data)), pos, fp), rtol=1e-10)
        assert grad_check(lambda: L.focal_loss_logits(z, pos, fp), {"z": z}).passed


class TestSmoothL1:
    def test_values(self):
        assert L.smooth_l1([0, 0, 0, 0], [0, 0, 0, 0]) == 0
        assert L.smooth_l1([0.5, 0, 0, 0], [0, 0, 0, 0]) == 0.25
        assert L.smooth_l1([2, 0, 0, 0], [0, 0, 0, 0]) == 2
        assert L.smooth_l1([1, 0, 0, 0], [0, 0, 0, 0]) == 1

    def test_continuity_at_one(self):
        for eps in (1e-6, 1e-9):
            assert abs(L.smooth_l1([1 + eps], [0]) - L.smooth_l1([1 - eps], [0])) < 4 * eps

    def test_rows_grad(self):
        rng = np.random.default_rng(2)
        pred = Parameter(rng.uniform(-3, 3, (6, 4)), dtype=np.float64)
        tgt = np.zeros((6, 4))
        out = L.smooth_l1_rows(pred, tgt)
        np.testing.assert_allclose(out.data, [L.smooth_l1(r, 0) for r in pred.data])
        assert grad_check(lambda: L.smooth_l1_rows(pred, tgt), {"p": pred}).passed


class TestEncoding:
    def test_identity(self):
        np.testing.assert_array_equal(L.encode_target([3, 4, 5, 6], [3, 4, 5, 6]), 0)

    def test_reference(self):
        t = L.encode_target([25, 20, 20, 20], [20, 20, 20, 10])
        np.testing.assert_allclose(t, [0.5, 0, 0, math.log(2)])
        assert t[3] == pytest.approx(0.6931, abs=1e-4)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        gt = np.column_stack([rng.uniform(-50, 150, (1000, 3)), rng.uniform(0.5, 40, 1000)])
        an = np.column_stack([rng.uniform(-50, 150, (1000, 3)), rng.uniform(0.5, 40, 1000)])
        back = L.decode_prediction(L.encode_target(gt, an), an)
        np.testing.assert_allclose(back, gt, rtol=1e-9)

    def test_non_positive(self):
        with pytest.raises(ValueError):
            L.encode_target([0, 0, 0, 0], [0, 0, 0, 1])


class TestCombined:
    def test_no_positives(self):
        assert L.combined_loss([0.2, 0.4], [9.0, 9.0], [0, 0]) == pytest.approx(0.3)

    def test_all_ignore(self):
        assert L.combined_loss([0.2, 0.4], [1.0, 1.0], [-1, -1]) == 0.0

    def test_three_anchor_manual(self):
        # anchor0 positive (cls .1, reg .5), anchor1 negative (cls .3), anchor2 ignore
        got = L.combined_loss([0.1, 0.3, 7.0], [0.5, 4.0, 4.0], [1, 0, -1], lam=1.0)
        assert got == pytest.approx((0.1 + 0.3) / 2 + 0.5)

    def test_misaligned(self):
        with pytest.raises(ValueError):
            L.combined_loss([0.1], [0.1, 0.2], [0])


class TestOhem:
    def test_basic(self):
        assert set(L.ohem_select([0.9, 0.1, 0.8, 0.2], 2)) == {0, 2}

    def test_fewer_than_n(self):
        assert list(L.ohem_select([0.4], 2)) == [0]

    @given(st.lists(st.sampled_from([0.1, 0.2, 0.5, 0.9]), min_size=1, max_size=12), st.integers(1, 5))
    def test_against_sort_oracle(self, probs, n):
        got = L.ohem_select(probs, n)
        oracle = sorted(range(len(probs)), key=lambda i: (-probs[i], i))[:n]
        assert sorted(got) == sorted(oracle)
        assert len(got) == min(n, len(probs))
        excluded = [p for i, p in enumerate(probs) if i not in set(got)]
        if excluded:
            assert min(probs[i] for i in got) >= max(excluded)


class TestAssign:
    def test_identical_positive(self):
        asg = L.assign_anchors([[10, 10, 10, 10]], [[10, 10, 10, 10]])
        assert asg.labels[0] == L.POSITIVE and asg.max_iou[0] == 1.0

    def test_disjoint_negative(self):
        asg = L.assign_anchors([[0, 0, 0, 2]], [[50, 50, 50, 2]])
        assert asg.labels[0] == L.NEGATIVE and asg.max_iou[0] == 0.0

    def test_ignore_band(self):
        asg = L.assign_anchors([[0, 0, 1, 2], [40, 40, 40, 2]], [[0, 0, 0, 2]], force_best=False)
        assert asg.max_iou[0] == pytest.approx(1 / 3)
        assert asg.labels[0] == L.IGNORE

    def test_every_gt_gets_a_positive(self):
        rng = np.random.default_rng(4)
        anchors = anchor_grid((4, 4, 4), 8).reshape(-1, 4)
        for _ in range(20):
            gt = np.column_stack([rng.uniform(2, 30, (3, 3)), rng.uniform(3, 12, 3)])
            asg = L.assign_anchors(anchors, gt)
            assert set(np.unique(asg.labels)) <= {-1, 0, 1}
            for j in range(3):
                assert np.any((asg.labels == L.POSITIVE) & (asg.gt_index == j))
            pos = asg.labels == L.POSITIVE
            np.testing.assert_allclose(
                L.decode_prediction(asg.targets[pos], anchors[pos]), gt[asg.gt_index[pos]], rtol=1e-9
            )


class TestDetectionLoss:
    def test_matches_manual_and_grads(self):
        rng = np.random.default_rng(5)
        A, g = 3, 2
        anchors = anchor_grid((g, g, g), 8).reshape(-1, 4)
        gt = np.array([[4.0, 4.0, 4.0, 9.0]])
        asg = L.assign_anchors(anchors, gt)
        cls = Parameter(rng.standard_normal((1, A, g, g, g)), dtype=np.float64)
        reg = Parameter(rng.standard_normal((1, 4 * A, g, g, g)) * 0.5, dtype=np.float64)
        total, stats = L.detection_loss(cls, reg, [asg], L.RPN_FOCAL, ohem_n=2)

        z = cls.data.reshape(-1)
        p = 1 / (1 + np.exp(-z))
        pos = np.flatnonzero(asg.labels == 1)
        neg = np.flatnonzero(asg.labels == 0)
        hard = neg[np.argsort(-p[neg], kind="stable")[:2]]
        cls_l = list(L.focal_loss(p[pos], True)) + list(L.focal_loss(p[hard], False))
        r = reg.data.reshape(A, 4, -1)
        reg_l = [L.smooth_l1(asg.targets[i], r[i // (g**3), :, i % (g**3)]) for i in pos]
        assert stats.n_pos == len(pos) and stats.n_neg == 2
        assert total.data == pytest.approx(np.mean(cls_l) + np.mean(reg_l), rel=1e-12)

        rep = grad_check(lambda: L.detection_loss(cls, reg, [asg])[0], {"cls": cls, "reg": reg})
        assert rep.passed, rep.lines()
