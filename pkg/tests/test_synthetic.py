import numpy as np
import pytest

from matchattn.decoder import consistency_check
from matchattn.synthetic import KINDS, gen_scene


def test_constant_shift_construction():
    sc = gen_scene("constant_shift", 16, 32, {"d": 4}, seed=3)
    assert (sc.R0[..., 0] == -4).all() and (sc.R0[..., 1] == 0).all()
    assert not sc.noc0[:, :4].any() and sc.noc0[:, 4:].all()
    np.testing.assert_array_equal(sc.I0[:, 4:], sc.I1[:, :-4])


def test_two_layer_occlusion_geometry():
    sc = gen_scene("two_layer", 32, 64, {"d_bg": 2, "d_fg": 8, "rect": (24, 8, 40, 24)}, seed=0)
    rows = slice(8, 24)
    # background just left of the rectangle is hidden by the foreground in view 1
    assert not sc.noc0[rows, 24 - 6 : 24].any()
    assert sc.noc0[rows, 24:40].all()
    assert sc.noc0[:8, 2:].all()
    np.testing.assert_allclose(sc.I0[rows, 24:40], sc.I1[rows, 16:32])


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gt_zero_residual_on_visible_pixels(kind, seed):
    sc = gen_scene(kind, 32, 64, seed=seed)
    _, _, res = consistency_check(sc.R0, sc.R1, 1.0)
    assert res[0][sc.noc0].max() < 1e-9
    assert res[1][sc.noc1].max() < 1e-9


def test_seed_determinism():
    a, b = gen_scene("smooth_warp", 16, 32, seed=5), gen_scene("smooth_warp", 16, 32, seed=5)
    assert np.array_equal(a.I0, b.I0) and np.array_equal(a.I1, b.I1)


@pytest.mark.parametrize("kind, params", [
    ("constant_shift", {"d": 40}),
    ("constant_shift", {"d": -1}),
    ("two_layer", {"d_bg": 5, "d_fg": 3}),
    ("smooth_warp", {"ty": 0.5}),
    ("constant_shift", {"q": 1}),
])
def test_invalid_params(kind, params):
    with pytest.raises(ValueError):
        gen_scene(kind, 16, 32, params)


def test_unknown_kind():
    with pytest.raises(ValueError):
        gen_scene("spiral", 8, 8)
