import numpy as np
import pytest

from matchattn import Tape, Var, ops
from matchattn.decoder import (
    DecoderConfig,
    MatchDecoder,
    consistency_check,
    convex_combine,
    convex_upsample,
    initial_correlation_flow,
    initial_correlation_stereo,
    preset,
)
from matchattn.gradcheck import check_gradients
from matchattn.losses import loss_total
from matchattn.synthetic import gen_scene
from matchattn.training import TrainConfig, train_toy


def _corr_weights(c, scale=2.0):
    return {
        "init.ln.g": np.ones(c),
        "init.ln.b": np.zeros(c),
        "init.Wa": scale * np.eye(c),
        "init.Wb": scale * np.eye(c),
    }


@pytest.fixture
def small_model():
    return MatchDecoder(preset("desk", "stereo"), seed=7)


class TestEncoder:
    def test_pyramid_shapes(self, f64, small_model, rng):
        feats = small_model.encoder_forward(rng.random((1, 64, 64, 3)))
        assert [f.shape[1:3] for f in feats] == [(16, 16), (8, 8), (4, 4), (2, 2)]
        assert [f.shape[-1] for f in feats] == list(small_model.cfg.channels)

    def test_zero_image_gives_zero_features(self, f64, small_model):
        feats = small_model.encoder_forward(np.zeros((1, 64, 64, 3)))
        assert all((f.data == 0).all() for f in feats)

    def test_indivisible_extent(self, f64, small_model):
        with pytest.raises(ValueError):
            small_model.encoder_forward(np.zeros((1, 48, 64, 3)))

    def test_gradient_through_two_stages(self, f64, small_model, rng):
        img = rng.random((1, 32, 32, 3))
        t = rng.normal(size=(1, 4, 4, small_model.cfg.channels[1]))
        k = small_model.params["enc.stem.k"]
        loss = lambda: ops.sum_(ops.mul(small_model.encoder_forward(img)[1], t))
        rep = check_gradients(loss, [k], max_entries=60, floor=1e-4)[0]
        assert rep.max_rel < 1e-4, rep


class TestInitialCorrelation:
    def test_flow_recovers_shift(self, f64, rng):
        F0 = rng.normal(size=(1, 8, 10, 16))
        F1 = np.roll(F0, 2, axis=2)
        R = initial_correlation_flow(np.concatenate([F0, F1]), _corr_weights(16)).R.data
        np.testing.assert_allclose(R[0, 2:-2, 2:-4], np.broadcast_to([2.0, 0.0], R[0, 2:-2, 2:-4].shape), atol=0.1)

    def test_flow_self_match(self, f64, rng):
        F0 = rng.normal(size=(1, 6, 6, 16))
        R = initial_correlation_flow(np.concatenate([F0, F0]), _corr_weights(16)).R.data
        assert np.abs(R).max() < 0.1

    def test_flow_uniform_features(self, f64):
        F = np.ones((2, 4, 5, 8)) * np.arange(8)
        R = initial_correlation_flow(F, _corr_weights(8)).R.data
        assert np.isfinite(R).all()
        # all cells tie: argmax is the first window-maximal cell, offsets stay bounded
        assert np.abs(R).max() <= 2 + np.hypot(4, 5)

    def test_stereo_recovers_shift(self, f64, rng):
        F0 = rng.normal(size=(1, 4, 12, 16))
        F1 = np.roll(F0, -3, axis=2)  # reference pixel x appears at x - 3
        init = initial_correlation_stereo(np.concatenate([F0, F1]), _corr_weights(16))
        R = init.R.data
        np.testing.assert_allclose(R[0, :, 3:, 0], -3.0, atol=0.1)
        assert (R[..., 1] == 0).all()
        assert init.logits.shape == (2, 4, 12, 12)

    def test_stereo_identical_views(self, f64, rng):
        F0 = rng.normal(size=(1, 3, 8, 16))
        R = initial_correlation_stereo(np.concatenate([F0, F0]), _corr_weights(16)).R.data
        assert np.abs(R).max() < 0.1

    def test_stereo_signs(self, f64, rng):
        R = initial_correlation_stereo(rng.normal(size=(2, 3, 8, 6)), _corr_weights(6, 1.0)).R.data
        assert (R[0, ..., 0] <= 0).all() and (R[1, ..., 0] >= 0).all()


class TestConvexUpsample:
    @pytest.mark.parametrize("factor", [2, 4])
    def test_constant_field(self, f64, rng, factor):
        R = np.broadcast_to([1.5, -2.25], (2, 3, 4, 2)).copy()
        logits = rng.normal(size=(2, 3, 4, factor, factor, 9))
        up = convex_combine(ops.softmax_lastdim(logits), R, factor).data
        np.testing.assert_allclose(up, np.broadcast_to([1.5 * factor, -2.25 * factor], up.shape), rtol=1e-14)

    def test_one_hot_centre_is_nearest(self, f64, rng):
        R = rng.normal(size=(1, 3, 4, 2))
        w = np.zeros((1, 3, 4, 2, 2, 9))
        w[..., 4] = 1
        up = convex_combine(w, R, 2).data
        np.testing.assert_array_equal(up, 2 * np.repeat(np.repeat(R, 2, axis=1), 2, axis=2))

    def test_gradients(self, f64, rng):
        R = Var(rng.normal(size=(2, 3, 3, 2)), name="R")
        guide = rng.normal(size=(2, 3, 3, 4))
        W = Var(rng.normal(size=(4, 36)) * 0.5, name="W_up")
        b = Var(rng.normal(size=36) * 0.1, name="b_up")
        t = rng.normal(size=(2, 6, 6, 2))
        loss = lambda: ops.sum_(ops.mul(convex_upsample(R, guide, W, b, 2), t))
        assert all(r.max_rel < 1e-6 for r in check_gradients(loss, [R, W, b]))


class TestConsistency:
    def test_consistent_pair(self):
        R0 = np.broadcast_to([-3.0, 0.0], (5, 9, 2))
        R1 = np.broadcast_to([3.0, 0.0], (5, 9, 2))
        m0, m1, res = consistency_check(R0, R1, 1.0)
        # only pixels whose match stays inside the image are exact
        assert (res[0][:, 3:] == 0).all() and m0[:, 3:].all()
        assert (res[1][:, :6] == 0).all() and m1[:, :6].all()

    def test_inconsistent_pair(self):
        R0 = np.broadcast_to([-3.0, 0.0], (4, 8, 2))
        m0, _, res = consistency_check(R0, np.zeros((4, 8, 2)), 1.0)
        assert (res[0] == 3).all() and not m0.any()


class TestDecoder:
    @pytest.mark.parametrize("task", ["stereo", "flow"])
    def test_outputs_and_layer_counts(self, f64, rng, task):
        model = MatchDecoder(preset("desk", task), seed=1)
        out = model(rng.random((32, 64, 3)), rng.random((32, 64, 3)))
        assert out.R.shape == (2, 32, 64, 2)
        assert out.sR.shape == (2, 32, 64, 2, 2)
        assert len(out.cross) == model.cfg.n_cross == 7
        assert len(out.self_R) == model.cfg.n_self == 11
        for a in out.alphas:
            np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-12)

    def test_flow_swap_symmetry(self, f64, rng):
        model = MatchDecoder(preset("desk", "flow"), seed=2)
        a, b = rng.random((32, 64, 3)), rng.random((32, 64, 3))
        np.testing.assert_allclose(model(a, b).R.data, model(b, a).R.data[::-1], atol=1e-12)

    def test_every_parameter_receives_gradient(self, f64, rng):
        model = MatchDecoder(preset("desk", "stereo"), seed=4)
        sc = gen_scene("two_layer", 64, 64, {"d_bg": 1, "d_fg": 4, "rect": (24, 16, 40, 48)}, seed=1)
        with Tape() as tape:
            rep = loss_total(model(sc.I0, sc.I1), sc.R0, model.cfg)
        tape.backward(rep.total)
        dead = [k for k, v in model.params.items() if v.grad is None or not np.any(v.grad)]
        assert dead == []

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DecoderConfig(windows=(5, 4, 3, 3))
        with pytest.raises(ValueError):
            DecoderConfig(task="depth")
        with pytest.raises(ValueError):
            preset("XL")

    def test_large_presets_construct(self):
        assert preset("T").channels == (32, 64, 128, 160)
        assert preset("B", "flow").task == "flow"


@pytest.mark.slow
def test_zero_motion_overfit():
    sc = gen_scene("smooth_warp", 64, 128, {"amp": 0.0, "tx": 0.0, "ty": 0}, seed=2)
    assert np.array_equal(sc.I0, sc.I1)
    model, _ = train_toy([sc], TrainConfig(steps=300), preset("desk", "flow"))
    flow = model(sc.I0, sc.I1).R.data[0]
    assert np.median(np.hypot(flow[..., 0], flow[..., 1])) < 0.3
