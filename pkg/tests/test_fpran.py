import numpy as np
import pytest

from abpdcnet.errors import ConfigError, ShapeError
from abpdcnet.fpran import (FpranConfig, cascade, init_sam_params, rotation_displacement,
                            sam_fine, sam_param_shapes)
from abpdcnet.volume import Rng, spatial_grid
from abpdcnet.warp import trilinear_sample

CFG = FpranConfig(channels=(2, 2, 3, 3), input_shape=(8, 8, 8),
                  level_strides=((1, 1, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2)),
                  attn_dim=3, hidden=4, refine_channels=3)


def _features(cfg, seed):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(1, c, *cfg.level_shape(lv))) for lv, c in zip((1, 2, 3, 4), cfg.channels)]


def test_zero_init_identity_cascade_is_exact_zero():
    cfg = FpranConfig(**{**CFG.__dict__, "use_rotation": False})
    P = init_sam_params(cfg, Rng(0))
    psi1, fields = cascade(_features(cfg, 1), _features(cfg, 2), P, cfg)
    assert len(fields) == 4
    assert np.all(psi1.value == 0)
    assert psi1.value.shape == (1, 3, 8, 8, 8)


def test_zero_init_with_rotation_equals_base_rotation():
    P = init_sam_params(CFG, Rng(0))
    psi1, _ = cascade(_features(CFG, 1), _features(CFG, 2), P, CFG)
    np.testing.assert_allclose(psi1.value, rotation_displacement(CFG, 1), atol=1e-12)


def test_rotation_displacement_moves_one_hot():
    src = np.zeros((1, 1, 8, 8, 8))
    src[0, 0, 2, 5, 7] = 1.0
    psi = rotation_displacement(CFG, 1)
    out, _ = trilinear_sample(src, spatial_grid((8, 8, 8)) + psi)
    assert out[0, 0, 0, 5, 2] == pytest.approx(1.0, abs=1e-12)


def test_param_shapes_cover_all_levels():
    names = sam_param_shapes(CFG)
    for lv in (1, 2, 3, 4):
        assert f"sam{lv}.q.w" in names and f"sam{lv}.out.b" in names
    assert names["sam4.refine.head.w"] == (12, 3)


def test_shape_and_rotation_errors():
    P = init_sam_params(CFG, Rng(0))
    f = _features(CFG, 1)
    with pytest.raises(ShapeError):
        cascade(f[:3], f[:3], P, CFG)
    with pytest.raises(ShapeError):
        sam_fine(f[0], f[0][:, :, :4], P, CFG, 1)
    bad = FpranConfig(**{**CFG.__dict__, "input_shape": (8, 8, 16)})
    with pytest.raises(ConfigError):
        cascade(_features(bad, 1), _features(bad, 2), init_sam_params(bad, Rng(0)), bad)
