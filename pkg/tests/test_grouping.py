import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tauflow import tensor as T
from tauflow.grouping import (DynamicGrouping, downsample_mask, group_features, groups_from_score,
                              masks_from_logits, tau_from_raw, tau_input_gradient_map)
from tauflow.tensor import ShapeError, Tensor, precision


@pytest.fixture
def grouping(rng):
    return DynamicGrouping(12, 8, 5, 1e-2, 1e3, 3, 0.1, rng)


class TestTau:
    def test_zero_weights(self, rng):
        g = DynamicGrouping(12, 8, 5, 1e-2, 1e3, 3, 0.1, rng)
        g.tau_conv.weight.data[...] = 0
        g.tau_conv.bias.data[...] = 0
        tau, _ = g.compute_tau(Tensor(rng.normal(size=(1, 12, 4, 4))))
        np.testing.assert_allclose(tau.data, math.log(2) + 1e-6, rtol=1e-6)

    def test_floor_and_ceiling(self):
        tau = tau_from_raw(Tensor(np.array([-100.0, 1e4, 0.0])), 1e-2, 1e3).data
        assert tau[0] == 1e-2 and tau[1] == 1e3
        assert tau[2] == pytest.approx(0.693148, abs=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1e6, 1e6), st.floats(0.01, 100.0))
    def test_range(self, shift, scale):
        raw = np.random.default_rng(0).normal(size=64) * scale + shift
        tau = tau_from_raw(Tensor(raw), 1e-2, 1e3).data
        assert np.all((tau >= 1e-2) & (tau <= 1e3))

    def test_non_finite_input_rejected(self, grouping):
        x = np.zeros((1, 12, 4, 4))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(T.NonFiniteError):
            grouping.compute_tau(Tensor(x))


@pytest.mark.parametrize("score,G", [(0.0, 1), (0.19, 1), (0.2, 2), (0.5, 3), (0.999, 5), (1.0, 5)])
def test_groups_from_score(score, G):
    assert groups_from_score(score, 5) == G


class TestMasks:
    def test_equal_logits_all_groups(self):
        m = masks_from_logits(T.zeros((1, 5, 3, 3)), 5).data
        np.testing.assert_allclose(m, 0.2, rtol=1e-6)

    def test_single_group(self, rng):
        m = masks_from_logits(Tensor(rng.normal(size=(2, 5, 3, 3))), 1).data
        np.testing.assert_array_equal(m[:, 0], 1.0)
        assert not m[:, 1:].any()

    def test_three_groups(self):
        m = masks_from_logits(T.zeros((1, 5, 3, 3)), 3).data
        np.testing.assert_allclose(m[:, :3], 1 / 3, rtol=1e-6)
        assert np.all(m[:, 3:] == 0.0)

    def test_invalid_G(self):
        with pytest.raises(ShapeError):
            masks_from_logits(T.zeros((1, 5, 2, 2)), 6)

    def test_lower_temperature_sharpens(self, rng):
        logits = Tensor(rng.normal(size=(2, 5, 6, 6)))
        prev = None
        for temp in (2.0, 1.0, 0.5, 0.25):
            peak = masks_from_logits(logits, 5, temp).data.max(axis=1)
            if prev is not None:
                assert np.all(peak > prev)
            prev = peak


class TestGroupFeatures:
    def test_partition_of_unity(self, rng):
        x = Tensor(rng.normal(size=(2, 6, 4, 4)))
        masks = masks_from_logits(Tensor(rng.normal(size=(2, 5, 4, 4))), 4)
        U = group_features(x, masks).data
        assert U.shape == (2, 5, 6, 4, 4)
        np.testing.assert_allclose(U.sum(axis=1), x.data, atol=1e-12)
        assert not U[:, 4].any()

    def test_single_group_and_uniform(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        U = group_features(x, masks_from_logits(T.zeros((1, 5, 4, 4), dtype=np.float64), 1)).data
        np.testing.assert_array_equal(U[:, 0], x.data)
        assert not U[:, 1:].any()
        U = group_features(x, Tensor(np.full((1, 5, 4, 4), 0.2))).data
        np.testing.assert_allclose(U, np.broadcast_to(x.data[:, None] / 5, U.shape), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            group_features(T.zeros((1, 3, 4, 4)), T.zeros((1, 5, 2, 2)))


class TestKeyMap:
    def test_zero_weights(self):
        key = tau_input_gradient_map(np.zeros((1, 4, 3, 3)), np.zeros((4, 2, 1, 1)), 1e-2, 1e3)
        assert not key.any()

    def test_saturated_pixel(self, rng):
        raw = rng.normal(size=(1, 4, 3, 3))
        raw[0, :, 1, 1] = -1e3
        key = tau_input_gradient_map(raw, rng.normal(size=(4, 2, 1, 1)), 1e-2, 1e3, normalize=False)
        assert key[0, 0, 1, 1] == 0.0
        normed = tau_input_gradient_map(raw, rng.normal(size=(4, 2, 1, 1)), 1e-2, 1e3)
        assert normed.min() >= 0 and normed.max() <= 1

    @pytest.mark.parametrize("cout,cin", [(1, 1), (4, 3)])
    def test_matches_finite_differences(self, cout, cin):
        rng = np.random.default_rng(cout * 10 + cin)
        w = rng.normal(size=(cout, cin, 1, 1))
        b = rng.normal(size=cout)
        u = rng.normal(size=(1, cin, 3, 3))

        def mean_tau(x):
            raw = np.einsum("oc,bchw->bohw", w[:, :, 0, 0], x) + b[None, :, None, None]
            return (np.logaddexp(0, raw) + 1e-6).mean(axis=1)  # (1, 3, 3); tau lies inside the clamp here

        eps = 1e-6
        grad = np.zeros((cin, 3, 3))
        for c in range(cin):
            d = np.zeros_like(u)
            d[0, c] = eps
            grad[c] = ((mean_tau(u + d) - mean_tau(u - d)) / (2 * eps))[0]  # pixels are independent
        oracle = np.sqrt((grad ** 2).sum(axis=0))
        raw = np.einsum("oc,bchw->bohw", w[:, :, 0, 0], u) + b[None, :, None, None]
        key = tau_input_gradient_map(raw, w, 1e-5, 1e5, normalize=False)[0, 0]
        assert np.max(np.abs(key - oracle)) / np.max(np.abs(oracle)) <= 1e-4


class TestComplexity:
    def test_edge_density_constant_image(self):
        d = DynamicGrouping.edge_density(np.full((2, 3, 16, 16), 0.3), 4)
        np.testing.assert_array_equal(d, 0.0)

    def test_edge_density_batch_normalised(self, rng):
        img = np.stack([rng.uniform(size=(3, 16, 16)), 0.1 * rng.uniform(size=(3, 16, 16))])
        d = DynamicGrouping.edge_density(img, 8)
        assert d[0] == pytest.approx(1.0, abs=1e-5) and 0 < d[1] < d[0]

    def test_plan(self, grouping, rng):
        ltc = Tensor(rng.normal(size=(3, 12, 4, 4)))
        image = rng.uniform(size=(3, 3, 16, 16))
        plan = grouping.assess_complexity(ltc, image)
        assert plan.score.shape == (3,)
        assert np.all((plan.score.data > 0) & (plan.score.data < 1))
        assert plan.per_image == [groups_from_score(s, 5) for s in plan.score.data]
        assert plan.G == max(plan.per_image)
        forced = grouping.assess_complexity(ltc, image, force_groups=2)
        assert forced.per_image == [2, 2, 2] and forced.G == 2


class TestRefine:
    def test_neutral(self, rng):
        g = DynamicGrouping(6, 4, 5, 1e-2, 1e3, 3, 0.0, rng)
        logits = Tensor(rng.normal(size=(2, 5, 4, 4)))
        res = g.refine_masks(logits, np.zeros((2, 1, 4, 4)), Tensor(rng.normal(size=(2, 6, 4, 4))), 5)
        np.testing.assert_allclose(res.masks.data, masks_from_logits(logits, 5).data, rtol=1e-12)
        assert res.temperatures == [1.0] * 4

    def test_perfect_prediction_temperature(self, rng):
        g = DynamicGrouping(6, 4, 5, 1e-2, 1e3, 3, 0.1, rng)
        g.fast_out.weight.data[...] = 0.0
        g.fast_out.bias.data[...] = 50.0  # sigmoid saturates to exactly 1
        target = np.ones((1, 1, 4, 4))
        res = g.refine_masks(Tensor(rng.normal(size=(1, 5, 4, 4))), np.zeros((1, 1, 4, 4)),
                             Tensor(rng.normal(size=(1, 6, 4, 4))), 3, target)
        assert res.rewards == pytest.approx([0.5, 0.5, 0.5], abs=1e-12)
        assert res.temperatures[-1] == pytest.approx(math.exp(-0.15), rel=1e-12)
        assert res.temperatures[-1] == pytest.approx(0.8607, abs=1e-4)

    def test_confidence_proxy_without_target(self, rng):
        g = DynamicGrouping(6, 4, 5, 1e-2, 1e3, 2, 0.1, rng)
        g.fast_out.weight.data[...] = 0.0
        g.fast_out.bias.data[...] = 0.0  # p = 0.5 everywhere: least confident
        res = g.refine_masks(Tensor(rng.normal(size=(1, 5, 4, 4))), np.zeros((1, 1, 4, 4)),
                             Tensor(rng.normal(size=(1, 6, 4, 4))), 5)
        assert res.rewards == pytest.approx([-0.5, -0.5])

    def test_key_regions_sharpen(self, rng):
        g = DynamicGrouping(6, 4, 5, 1e-2, 1e3, 3, 0.0, rng)
        logits = Tensor(rng.normal(size=(1, 5, 4, 4)))
        key = np.zeros((1, 1, 4, 4))
        key[0, 0, :2] = 1.0
        res = g.refine_masks(logits, key, Tensor(rng.normal(size=(1, 6, 4, 4))), 5)
        plain = masks_from_logits(logits, 5).data
        assert np.all(res.masks.data.max(axis=1)[0, :2] > plain.max(axis=1)[0, :2])
        np.testing.assert_allclose(res.masks.data[0, :, 2:], plain[0, :, 2:], rtol=1e-12)

    def test_target_shape_mismatch(self, grouping, rng):
        with pytest.raises(ShapeError):
            grouping.refine_masks(T.zeros((1, 5, 4, 4)), np.zeros((1, 1, 4, 4)), T.zeros((1, 12, 4, 4)), 5,
                                  np.zeros((1, 1, 8, 8)))


def test_downsample_mask():
    m = np.zeros((1, 1, 8, 8))
    m[..., :4, :] = 1
    small = downsample_mask(m, 4)
    assert small.shape == (1, 1, 4, 4)
    np.testing.assert_array_equal(small[0, 0, :2], 1)
    np.testing.assert_array_equal(small[0, 0, 2:], 0)
