"""Saliency method tests: analytic hand cases, formula re-implementations,
conservation checks and the cross-method invariants."""

import numpy as np
import pytest

from salbench.engine import (Conv2D, Dense, GlobalAvgPool, GlobalMaxPool,
                             ModelSpec, PassCounter, ReLU, build_small_vgg,
                             backward, forward)
from salbench.errors import (ConfigInvalid, NotCamEligible, ParamInvalid,
                             ShapeInvalid)
from salbench.saliency import (LrpParams, Method, OcclusionConfig, SaliencyMap,
                               cam_map, compute_map, gradcampp_map,
                               hirescam_map, lrp_composite_map, occlusion_map,
                               upsample_map, window_starts)

from conftest import random_input, seeded_conv, seeded_dense


def flat_linear_model(weights, bias=0.0, shape=(1, 4, 4)):
    """y = sum(w_i * x_i) over the flattened input."""
    n = int(np.prod(shape))
    w = np.asarray(weights, dtype=float).reshape(1, n)
    layers = (Dense(n, 1, weights=w, bias=np.array([float(bias)])),)
    return ModelSpec(layers=layers, input_shape=shape, class_count=1)


class TestWindowStarts:
    def test_paper_tile_geometry(self):
        starts = window_starts(512, 64, 32)
        # enumeration oracle: step until flush, clamp the remainder
        oracle = sorted({min(i * 32, 512 - 64) for i in range((512 - 64) // 32 + 2)})
        assert starts == oracle
        assert len(starts) == 15

    def test_clamped_tail(self):
        assert window_starts(10, 4, 3) == [0, 3, 6]
        assert window_starts(11, 4, 3) == [0, 3, 6, 7]


class TestOcclusion:
    def test_constant_model_gives_zero_map(self):
        model = flat_linear_model(np.zeros(16), bias=3.0)
        tile = random_input(0, (1, 4, 4))
        m = occlusion_map(model, tile, OcclusionConfig(2, 2, 0.0), 0)
        assert np.array_equal(m.values, np.zeros((4, 4)))

    def test_linear_model_window_drops_are_analytic(self):
        rng = np.random.default_rng(1)
        w = rng.uniform(-1, 1, 16)
        model = flat_linear_model(w)
        tile = random_input(2, (1, 4, 4))
        m = occlusion_map(model, tile, OcclusionConfig(2, 2, 0.0), 0)
        wx = (w.reshape(4, 4) * tile[0])
        for wy in (0, 2):
            for wxo in (0, 2):
                drop = wx[wy:wy + 2, wxo:wxo + 2].sum()
                assert np.allclose(m.values[wy:wy + 2, wxo:wxo + 2], drop, atol=1e-12)

    def test_single_window_covers_everything(self):
        rng = np.random.default_rng(3)
        w = rng.uniform(-1, 1, 16)
        model = flat_linear_model(w)
        tile = random_input(4, (1, 4, 4))
        m = occlusion_map(model, tile, OcclusionConfig(4, 4, 0.0), 0)
        assert np.allclose(m.values, (w.reshape(4, 4) * tile[0]).sum(), atol=1e-12)

    def test_forward_pass_count(self):
        rng = np.random.default_rng(0)
        layers = (seeded_conv(rng, 3, 2, k=3, padding=1), ReLU(), GlobalMaxPool(),
                  seeded_dense(rng, 2, 2))
        model = ModelSpec(layers=layers, input_shape=(3, 64, 64), class_count=2)
        counter = PassCounter()
        occlusion_map(model, random_input(1, (3, 64, 64)),
                      OcclusionConfig(16, 8, 0.0), 1, counter)
        assert counter.snapshot() == (7 * 7 + 1, 0)

    def test_bad_config(self):
        model = flat_linear_model(np.zeros(16))
        with pytest.raises(ConfigInvalid):
            occlusion_map(model, np.zeros((1, 4, 4)), OcclusionConfig(5, 1, 0.0), 0)
        with pytest.raises(ConfigInvalid):
            occlusion_map(model, np.zeros((1, 4, 4)), OcclusionConfig(2, 3, 0.0), 0)


def pool_dense_model(weight, shape=(1, 2, 2), pool="avg"):
    """Global pool straight on the input, then a 1-unit Dense."""
    pool_layer = GlobalAvgPool() if pool == "avg" else GlobalMaxPool()
    layers = (pool_layer, Dense(shape[0], 1, weights=np.array([[float(weight)]]),
                                bias=np.zeros(1)))
    return ModelSpec(layers=layers, input_shape=shape, class_count=1)


class TestCam:
    def test_zero_weights_zero_map(self):
        model = pool_dense_model(0.0)
        trace = forward(model, random_input(0, (1, 2, 2)))
        m = cam_map(model, trace, 0, upsample=False)
        assert np.array_equal(m.values, np.zeros((2, 2)))

    def test_single_channel_weight_two(self):
        model = pool_dense_model(2.0)
        a = random_input(1, (1, 2, 2))
        trace = forward(model, a)
        m = cam_map(model, trace, 0, upsample=False)
        assert np.array_equal(m.values, 2.0 * a[0])

    def test_small_vgg_matches_weighted_sum_oracle(self):
        model = build_small_vgg(32, seed=4)
        trace = forward(model, random_input(5, (3, 32, 32)))
        m = cam_map(model, trace, 1, upsample=False)
        acts = trace.activations[-3]
        w = model.layers[-1].weights[1]
        want = np.zeros(acts.shape[1:])
        for k in range(acts.shape[0]):
            want += w[k] * acts[k]
        assert np.allclose(m.values, want, atol=1e-12)

    def test_not_eligible_raises(self):
        model = flat_linear_model(np.zeros(16))
        trace = forward(model, np.zeros((1, 4, 4)))
        with pytest.raises(NotCamEligible):
            cam_map(model, trace, 0)

    def test_signed_output_preserved(self):
        model = build_small_vgg(32, seed=4)
        trace = forward(model, random_input(5, (3, 32, 32)))
        m = cam_map(model, trace, 0)
        assert (m.values < 0).any() and (m.values > 0).any()


class TestGradCampp:
    def test_zero_gradient_zero_map(self):
        model = pool_dense_model(0.0)
        trace = forward(model, random_input(0, (1, 2, 2)))
        m = gradcampp_map(model, trace, 0, target_layer=-1, upsample=False)
        assert np.array_equal(m.values, np.zeros((2, 2)))

    def test_single_pixel_closed_form(self):
        cw = np.full((1, 1, 1, 1), 0.8)
        layers = (Conv2D(1, 1, 1, weights=cw, bias=np.zeros(1)), GlobalMaxPool(),
                  Dense(1, 1, weights=np.array([[0.7]]), bias=np.zeros(1)))
        model = ModelSpec(layers=layers, input_shape=(1, 1, 1), class_count=1)
        trace = forward(model, np.array([[[1.5]]]))
        m = gradcampp_map(model, trace, 0, upsample=False)
        a, g = 0.8 * 1.5, 0.7
        alpha = g ** 2 / (2 * g ** 2 + a * g ** 3)
        want = max(alpha * g * a, 0.0)
        assert m.values[0, 0] == pytest.approx(want, rel=1e-12)

    def test_formula_reimplementation_oracle(self):
        model = build_small_vgg(32, seed=6)
        trace = forward(model, random_input(7, (3, 32, 32)))
        m = gradcampp_map(model, trace, 1, upsample=False)
        acts = trace.activations[-3]
        g = backward(model, trace, 1)[-3 + len(model.layers) + 1]
        want = np.zeros(acts.shape[1:])
        for k in range(acts.shape[0]):
            gk, ak = g[k], acts[k]
            den = 2.0 * gk ** 2 + (ak * gk ** 3).sum()
            alpha = np.where(den != 0, gk ** 2 / np.where(den != 0, den, 1.0), 0.0)
            wk = (alpha * np.clip(gk, 0, None)).sum()
            want += wk * ak
        want = np.clip(want, 0, None)
        assert np.allclose(m.values, want, atol=1e-10)

    @pytest.mark.parametrize("seed", range(4))
    def test_nonnegative(self, seed):
        model = build_small_vgg(16, seed=seed)
        trace = forward(model, random_input(seed, (3, 16, 16)))
        m = gradcampp_map(model, trace, 0)
        assert (m.values >= 0).all()


class TestHiResCam:
    def test_zero_gradients_zero_map(self):
        model = pool_dense_model(0.0)
        trace = forward(model, random_input(0, (1, 2, 2)))
        m = hirescam_map(model, trace, 0, target_layer=-1, upsample=False)
        assert np.array_equal(m.values, np.zeros((2, 2)))

    def test_global_maxpool_tail_sparsity(self):
        model = build_small_vgg(32, seed=2)
        trace = forward(model, random_input(3, (3, 32, 32)))
        m = hirescam_map(model, trace, 1, upsample=False)
        channels = trace.activations[-3].shape[0]
        assert np.count_nonzero(m.values) <= channels

    def test_avgpool_identity_with_cam(self):
        model = build_small_vgg(32, seed=2, pool="avg")
        trace = forward(model, random_input(3, (3, 32, 32)))
        hires = hirescam_map(model, trace, 1, upsample=False)
        cam = cam_map(model, trace, 1, upsample=False)
        h, w = trace.activations[-3].shape[1:]
        assert np.allclose(hires.values, cam.values / (h * w), atol=1e-12)


class TestLrp:
    def test_single_dense_is_input_times_weight(self):
        rng = np.random.default_rng(8)
        w = rng.uniform(-1, 1, 6)
        model = flat_linear_model(w, shape=(1, 1, 6))
        x = random_input(9, (1, 1, 6))
        trace = forward(model, x)
        m = lrp_composite_map(model, trace, 0, LrpParams(epsilon=1e-12))
        want = (w * x.reshape(-1)).reshape(1, 6)
        assert np.allclose(m.values, want, rtol=1e-9)
        assert m.values.sum() == pytest.approx(trace.logits[0], rel=1e-9)

    def test_alpha_beta_hand_example(self):
        # one positive contribution (3) and one negative (-1); alpha=2, beta=1
        w = np.zeros((1, 1, 2, 2))
        w[0, 0, 0, 0], w[0, 0, 0, 1] = 1.0, -1.0
        layers = (Conv2D(1, 1, 2, weights=w, bias=np.zeros(1)),)
        model = ModelSpec(layers=layers, input_shape=(1, 2, 2), class_count=1)
        x = np.array([[[3.0, 1.0], [0.0, 0.0]]])
        trace = forward(model, x)
        m = lrp_composite_map(model, trace, 0, LrpParams(alpha=2.0, beta=1.0))
        assert np.allclose(m.values, [[4.0, -2.0], [0.0, 0.0]], atol=1e-12)
        assert m.values.sum() == pytest.approx(trace.logits[0])

    @pytest.mark.parametrize("alpha,beta", [(1.0, 0.0), (2.0, 1.0)])
    def test_conservation_bias_free(self, alpha, beta):
        from conftest import conservation_cases
        for model, x, trace in conservation_cases(3):
            m = lrp_composite_map(model, trace, 1, LrpParams(1e-9, alpha, beta))
            logit = trace.logits[1]
            assert abs(m.values.sum() - logit) / abs(logit) <= 1e-6

    def test_param_validation(self):
        model = build_small_vgg(16, seed=0)
        trace = forward(model, random_input(0, (3, 16, 16)))
        with pytest.raises(ParamInvalid):
            lrp_composite_map(model, trace, 0, LrpParams(alpha=2.0, beta=0.5))
        with pytest.raises(ParamInvalid):
            lrp_composite_map(model, trace, 0, LrpParams(epsilon=0.0))

    def test_winner_take_all_through_maxpool(self):
        model = build_small_vgg(16, seed=3)
        trace = forward(model, random_input(4, (3, 16, 16)))
        m = lrp_composite_map(model, trace, 1)
        assert np.isfinite(m.values).all()
        assert (m.values != 0).any()


class TestUpsample:
    def test_constant_stays_constant(self):
        m = SaliencyMap(np.full((3, 3), 2.5))
        up = upsample_map(m, 9, 7)
        assert np.allclose(up.values, 2.5, atol=1e-12)
        assert up.values.shape == (7, 9)

    def test_one_by_one_fills(self):
        up = upsample_map(SaliencyMap(np.array([[4.0]])), 5, 5)
        assert np.array_equal(up.values, np.full((5, 5), 4.0))

    def test_corner_aligned_hand_grid(self):
        m = SaliencyMap(np.array([[0.0, 1.0], [2.0, 3.0]]))
        up = upsample_map(m, 4, 4)
        want = np.array([[2 * r / 3 + c / 3 for c in range(4)] for r in range(4)])
        assert np.allclose(up.values, want, atol=1e-12)

    def test_range_bounded(self):
        rng = np.random.default_rng(11)
        v = rng.uniform(-5, 5, (4, 6))
        up = upsample_map(SaliencyMap(v), 24, 16)
        assert up.values.min() >= v.min() - 1e-12
        assert up.values.max() <= v.max() + 1e-12

    def test_nearest_mode(self):
        m = SaliencyMap(np.array([[1.0, 2.0], [3.0, 4.0]]))
        up = upsample_map(m, 4, 4, mode="nearest")
        assert set(np.unique(up.values)) == {1.0, 2.0, 3.0, 4.0}

    def test_shrinking_rejected(self):
        with pytest.raises(ShapeInvalid):
            upsample_map(SaliencyMap(np.zeros((4, 4))), 2, 2)


class TestCrossMethod:
    def test_pass_count_contract(self):
        model = build_small_vgg(16, seed=1)
        tile = random_input(2, (3, 16, 16))
        expected = {
            Method.CAM: (1, 0),
            Method.GRADCAMPP: (1, 1),
            Method.HIRESCAM: (1, 1),
            Method.LRP: (1, 1),
            Method.OCCLUSION: (len(window_starts(16, 8, 4)) ** 2 + 1, 0),
        }
        for method, want in expected.items():
            counter = PassCounter()
            compute_map(method, model, tile, 1, occlusion=OcclusionConfig(8, 4, 0.0),
                        counter=counter)
            assert counter.snapshot() == want, method

    def test_dense_scaling_by_two(self):
        base = build_small_vgg(16, seed=7)
        head = base.layers[-1]
        scaled = ModelSpec(
            layers=base.layers[:-1] + (Dense(head.in_features, head.out_features,
                                             weights=2.0 * head.weights,
                                             bias=2.0 * head.bias),),
            input_shape=base.input_shape, class_count=base.class_count)
        tile = random_input(8, (3, 16, 16))
        cfg = OcclusionConfig(8, 4, 0.0)
        for method in Method:
            m1 = compute_map(method, base, tile, 1, occlusion=cfg)
            m2 = compute_map(method, scaled, tile, 1, occlusion=cfg)
            if method in (Method.CAM, Method.HIRESCAM):
                assert np.array_equal(m2.values, 2.0 * m1.values), method
            if method is Method.GRADCAMPP:
                # its per-channel denominator 2g^2 + sum(A g^3) is not
                # scale-homogeneous, so only near-invariance is achievable
                from scipy.stats import spearmanr
                rho = spearmanr(m1.values.reshape(-1), m2.values.reshape(-1)).statistic
                assert rho >= 0.98
            else:
                order1 = np.argsort(-m1.values.reshape(-1), kind="stable")
                order2 = np.argsort(-m2.values.reshape(-1), kind="stable")
                assert np.array_equal(order1, order2), method

    def test_all_methods_deterministic(self):
        model = build_small_vgg(16, seed=9)
        tile = random_input(10, (3, 16, 16))
        cfg = OcclusionConfig(8, 8, 0.0)
        for method in Method:
            a = compute_map(method, model, tile, 1, occlusion=cfg)
            b = compute_map(method, model, tile, 1, occlusion=cfg)
            assert np.array_equal(a.values, b.values), method
