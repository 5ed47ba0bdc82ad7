"""Feature-pyramid registration: four spatial alignment modules (SAMs)
run coarse to fine.

The coarsest SAM re-orients CT features with the affine A = R . (I + refine),
attends MRI queries over all rotated CT positions and folds the affine into
its displacement, so psi_4 already carries the rotation.  Finer SAMs look at
CT features pre-warped by the upsampled coarser field, attend inside a
local window and return a residual that is composed with that field.

``P`` arguments map parameter names to arrays or tape variables; names are
listed by :func:`sam_param_shapes`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tape
from .attention import global_attention_var, window_attention_var
from .errors import ConfigError, ShapeError
from .ops import conv3d, global_avg_pool, linear, pointwise
from .tape import Var, concat, const, relu
from .volume import spatial_grid
from .warp import (affine_compose_var, affine_displacement_var, base_rotation, compose_var,
                   identity_affine, sample_var, upsample_var, warp_var)

LEVELS = (1, 2, 3, 4)


@dataclass(frozen=True)
class FpranConfig:
    channels: tuple[int, int, int, int]  # feature channels per level, fine -> coarse
    input_shape: tuple[int, int, int]
    level_strides: tuple[tuple[int, int, int], ...]  # cumulative stride of each level
    attn_dim: int = 16
    hidden: int = 16
    window: int = 3
    refine_channels: int = 16
    use_rotation: bool = True
    additive: bool = False  # literal psi_res + psi_up instead of composition

    def level_shape(self, level: int) -> tuple[int, int, int]:
        s = self.level_strides[level - 1]
        return tuple(n // k for n, k in zip(self.input_shape, s))


def sam_param_shapes(cfg: FpranConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    d, h = cfg.attn_dim, cfg.hidden
    for lv in LEVELS:
        c = cfg.channels[lv - 1]
        p = f"sam{lv}."
        for m in ("ct", "mri"):
            shapes[p + f"enh_{m}.w"] = (c, c, 3, 3, 3)
            shapes[p + f"enh_{m}.b"] = (c,)
        shapes[p + "q.w"] = (d, c)
        shapes[p + "k.w"] = (d, c)
        shapes[p + "v.w"] = (d, c)
        shapes[p + "mlp1.w"] = (h, c + d + 3)
        shapes[p + "mlp1.b"] = (h,)
        shapes[p + "out.w"] = (3, h)
        shapes[p + "out.b"] = (3,)
    r, c4 = cfg.refine_channels, cfg.channels[3]
    shapes["sam4.refine.conv1.w"] = (r, c4, 3, 3, 3)
    shapes["sam4.refine.conv2.w"] = (r, r, 3, 3, 3)
    shapes["sam4.refine.conv3.w"] = (r, r, 3, 3, 3)
    for i in (1, 2, 3):
        shapes[f"sam4.refine.conv{i}.b"] = (r,)
    shapes["sam4.refine.head.w"] = (12, r)
    shapes["sam4.refine.head.b"] = (12,)
    return shapes


def init_sam_params(cfg: FpranConfig, rng, zero_init_output: bool = True) -> dict[str, np.ndarray]:
    """He-style initialization; output projections and the affine head start
    at zero (identity transform) unless ``zero_init_output`` is False."""
    out = {}
    for name, shape in sam_param_shapes(cfg).items():
        if name.endswith(".b"):
            out[name] = np.zeros(shape)
            if not zero_init_output and (".out." in name or ".head." in name):
                out[name] = rng.normal(0.0, 0.05, shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        std = np.sqrt(2.0 / fan_in) if len(shape) == 5 else np.sqrt(1.0 / fan_in)
        if ".out." in name or ".head." in name:
            out[name] = rng.normal(0.0, 0.05 * std, shape) if not zero_init_output else np.zeros(shape)
        else:
            out[name] = rng.normal(0.0, std, shape)
    return out


def _check_rotation_grid(cfg: FpranConfig):
    z, _, x = cfg.level_shape(4)
    if cfg.use_rotation and z != x:
        raise ConfigError(f"level-4 z/x extents differ ({z} vs {x}); the base rotation needs them equal")


def _base_affine(cfg: FpranConfig) -> np.ndarray:
    return base_rotation() if cfg.use_rotation else identity_affine()


@dataclass
class SamTrace:
    """Intermediates kept for inspection and tests."""

    weights: dict = field(default_factory=dict)
    affine: Var | None = None
    residuals: dict = field(default_factory=dict)


def _enhance(P, lv, f_ct, f_mri):
    p = f"sam{lv}."
    et = conv3d(f_ct, P[p + "enh_ct.w"], P[p + "enh_ct.b"])
    em = conv3d(f_mri, P[p + "enh_mri.w"], P[p + "enh_mri.b"])
    return et, em


def _head(P, lv, em, attended):
    p = f"sam{lv}."
    hid = relu(pointwise(concat([em, attended]), P[p + "mlp1.w"], P[p + "mlp1.b"]))
    return pointwise(hid, P[p + "out.w"], P[p + "out.b"])


def refine_affine(P, f4_ct_enh, cfg: FpranConfig) -> Var:
    """A = R . (I + head(GAP(conv^3(f)))) per batch item, shape (n, 3, 4)."""
    h = f4_ct_enh
    for i in (1, 2, 3):
        h = relu(conv3d(h, P[f"sam4.refine.conv{i}.w"], P[f"sam4.refine.conv{i}.b"]))
    delta = linear(global_avg_pool(h), P["sam4.refine.head.w"], P["sam4.refine.head.b"])
    n = delta.value.shape[0]
    L = tape.add(tape.reshape(delta, (n, 3, 4)), identity_affine())
    return affine_compose_var(_base_affine(cfg), L)


def sam_coarse(f4_ct, f4_mri, P: Mapping, cfg: FpranConfig, trace: SamTrace | None = None) -> Var:
    """Level-4 field: rotate CT features, attend globally, fold the affine in."""
    _check_rotation_grid(cfg)
    f4_ct, f4_mri = const(f4_ct), const(f4_mri)
    if f4_ct.value.shape != f4_mri.value.shape:
        raise ShapeError(f"level-4 features differ: {f4_ct.value.shape} vs {f4_mri.value.shape}")
    n = f4_ct.value.shape[0]
    sp = f4_ct.value.shape[2:]
    frame, stride = cfg.input_shape, cfg.level_strides[3]
    et, em = _enhance(P, 4, f4_ct, f4_mri)
    A = refine_affine(P, et, cfg)
    grid = spatial_grid(sp, n)
    rotated = sample_var(et, tape.add(grid, affine_displacement_var(A, grid, frame, stride)))
    q = pointwise(em, P["sam4.q.w"])
    k = pointwise(rotated, P["sam4.k.w"])
    v = pointwise(rotated, P["sam4.v.w"])
    att, box = global_attention_var(q, k, v)
    res = _head(P, 4, em, att)
    # psi_4(v) = a(v + res(v)) - v with a the affine point map
    psi4 = tape.add(res, affine_displacement_var(A, tape.add(grid, res), frame, stride))
    if trace is not None:
        trace.weights[4] = box["weights"]
        trace.affine = A
        trace.residuals[4] = res
    return psi4


def sam_fine(fi_ct_warped, fi_mri, P: Mapping, cfg: FpranConfig, level: int,
             trace: SamTrace | None = None) -> Var:
    """Residual field at ``level`` from windowed cross-attention."""
    if level not in (1, 2, 3):
        raise ValueError(f"fine SAM levels are 1..3, got {level}")
    fi_ct_warped, fi_mri = const(fi_ct_warped), const(fi_mri)
    if fi_ct_warped.value.shape != fi_mri.value.shape:
        raise ShapeError(f"level-{level} features differ: {fi_ct_warped.value.shape} "
                         f"vs {fi_mri.value.shape}")
    p = f"sam{level}."
    et, em = _enhance(P, level, fi_ct_warped, fi_mri)
    q = pointwise(em, P[p + "q.w"])
    k = pointwise(et, P[p + "k.w"])
    v = pointwise(et, P[p + "v.w"])
    att, box = window_attention_var(q, k, v, cfg.window)
    res = _head(P, level, em, att)
    if trace is not None:
        trace.weights[level] = box["weights"]
        trace.residuals[level] = res
    return res


def cascade(F_ct: Sequence, F_mri: Sequence, P: Mapping, cfg: FpranConfig,
            trace: SamTrace | None = None) -> tuple[Var, list[Var]]:
    """Coarse-to-fine fields; returns (psi_1, [psi_4, psi_3, psi_2, psi_1])."""
    if len(F_ct) != 4 or len(F_mri) != 4:
        raise ShapeError("feature pyramids must have exactly 4 levels")
    for lv in LEVELS:
        a, b = const(F_ct[lv - 1]).value.shape, const(F_mri[lv - 1]).value.shape
        if a != b or a[2:] != cfg.level_shape(lv):
            raise ShapeError(f"level {lv}: CT {a}, MRI {b}, expected grid {cfg.level_shape(lv)}")
    psi = sam_coarse(F_ct[3], F_mri[3], P, cfg, trace)
    fields = [psi]
    for lv in (3, 2, 1):
        up = upsample_var(psi, cfg.level_shape(lv))
        moved = warp_var(F_ct[lv - 1], up)
        res = sam_fine(moved, F_mri[lv - 1], P, cfg, lv, trace)
        psi = tape.add(up, res) if cfg.additive else compose_var(up, res)
        fields.append(psi)
    return psi, fields


def rotation_displacement(cfg: FpranConfig, level: int, n: int = 1, A: np.ndarray | None = None) -> np.ndarray:
    """Displacement equivalent of the (base) affine on the level grid."""
    A = _base_affine(cfg) if A is None else A
    grid = spatial_grid(cfg.level_shape(level), n)
    return affine_displacement_var(A, grid, cfg.input_shape, cfg.level_strides[level - 1]).value
