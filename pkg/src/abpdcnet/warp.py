"""Differentiable trilinear resampling and displacement-field algebra.

Displacement fields are (n, 3, z, y, x) volumes holding (dz, dy, dx) in
voxel units of the grid they live on.  Warping pulls: out(v) = src(v + psi(v)).

At an exact integer coordinate the sampler uses the cell [i, i+1] (floor),
so its coordinate derivative there is the right-sided difference.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError
from .kinks import note_kink
from .tape import Var, _unbroadcast, apply
from .volume import spatial_grid

PADDING = ("zeros", "border")

_CORNERS = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]


def trilinear_sample(src: np.ndarray, coords: np.ndarray, padding: str = "zeros"):
    """Sample ``src`` (n, c, D, H, W) at ``coords`` (n, 3, ...) given as (z, y, x).

    ``padding="zeros"`` reads 0 outside the volume; ``"border"`` clamps the
    coordinates into range (used for displacement fields).  Returns
    ``(out, ctx)`` with ``out`` of shape (n, c, ...).
    """
    if src.ndim != 5 or coords.ndim < 2 or coords.shape[1] != 3:
        raise ShapeError(f"bad sampler shapes src={src.shape} coords={coords.shape}")
    if coords.shape[0] != src.shape[0]:
        raise ShapeError(f"batch mismatch: src {src.shape[0]} vs coords {coords.shape[0]}")
    if padding not in PADDING:
        raise ValueError(f"unknown padding {padding!r}")
    if not np.all(np.isfinite(coords)):
        raise NumericError("non-finite sampling coordinate")
    n, c = src.shape[:2]
    dims = src.shape[2:]
    out_sp = coords.shape[2:]
    pts = coords.reshape(n, 3, -1)
    clamped = None
    if padding == "border":
        hi = np.array(dims, dtype=float).reshape(1, 3, 1) - 1.0
        clamped = (pts < 0) | (pts > hi)
        pts = np.clip(pts, 0.0, hi)
    base = np.floor(pts)
    frac = pts - base
    base = base.astype(np.int64)
    note_kink(base)
    if clamped is not None:
        note_kink(clamped)
    src_flat = src.reshape(n, c, -1)
    corners = []
    out = np.zeros((n, c, pts.shape[2]), dtype=np.result_type(src, coords))
    for corner in _CORNERS:
        idx = [base[:, a] + corner[a] for a in range(3)]
        valid = np.ones(idx[0].shape, dtype=bool)
        for a in range(3):
            valid &= (idx[a] >= 0) & (idx[a] < dims[a])
        w1 = [frac[:, a] if corner[a] else 1.0 - frac[:, a] for a in range(3)]
        flat = (np.clip(idx[0], 0, dims[0] - 1) * dims[1] + np.clip(idx[1], 0, dims[1] - 1)) * dims[2] \
            + np.clip(idx[2], 0, dims[2] - 1)
        vals = np.take_along_axis(src_flat, np.broadcast_to(flat[:, None, :], (n, c, flat.shape[1])), axis=2)
        vals = vals * valid[:, None, :]
        out += (w1[0] * w1[1] * w1[2])[:, None, :] * vals
        corners.append((corner, flat, valid, w1, vals))
    ctx = (src.shape, coords.shape, corners, clamped)
    return out.reshape(n, c, *out_sp), ctx


def trilinear_sample_backward(g: np.ndarray, ctx):
    """Returns (d_src, d_coords)."""
    src_shape, coords_shape, corners, clamped = ctx
    n, c = src_shape[:2]
    nvox = int(np.prod(src_shape[2:]))
    g2 = g.reshape(n, c, -1)
    offs = ((np.arange(n)[:, None] * c + np.arange(c)[None, :]) * nvox)[:, :, None]
    idx_all, w_all = [], []
    dco = np.zeros((n, 3, g2.shape[2]))
    for corner, flat, valid, w1, vals in corners:
        wt = w1[0] * w1[1] * w1[2] * valid
        idx_all.append((offs + flat[:, None, :]).ravel())
        w_all.append((g2 * wt[:, None, :]).ravel())
        gv = (g2 * vals).sum(axis=1)
        for a in range(3):
            others = [w1[b] for b in range(3) if b != a]
            sign = 1.0 if corner[a] else -1.0
            dco[:, a] += sign * others[0] * others[1] * gv
    dsrc = np.bincount(np.concatenate(idx_all), weights=np.concatenate(w_all),
                       minlength=n * c * nvox).reshape(src_shape)
    if clamped is not None:
        dco[clamped] = 0.0
    return dsrc, dco.reshape(coords_shape)


def _check_field(psi: np.ndarray, name: str = "psi"):
    if psi.ndim != 5 or psi.shape[1] != 3:
        raise ShapeError(f"{name} must be a (n, 3, z, y, x) displacement field, got {psi.shape}")


def warp(src: np.ndarray, psi: np.ndarray):
    """Pull-warp: out(v) = src(v + psi(v)), zero outside ``src``."""
    _check_field(psi)
    if src.ndim != 5 or src.shape[0] != psi.shape[0]:
        raise ShapeError(f"warp: src {src.shape} incompatible with psi {psi.shape}")
    return trilinear_sample(src, spatial_grid(psi.shape[2:]) + psi)


def warp_backward(g, ctx):
    return trilinear_sample_backward(g, ctx)


def compose(outer: np.ndarray, inner: np.ndarray, additive: bool = False, padding: str = "border"):
    """Field of ``warp(warp(src, outer), inner)``: inner(v) + outer(v + inner(v)).

    ``additive=True`` returns outer + inner instead.
    """
    _check_field(outer, "outer")
    _check_field(inner, "inner")
    if outer.shape != inner.shape:
        raise ShapeError(f"compose: shapes differ {outer.shape} vs {inner.shape}")
    if additive:
        return outer + inner, None
    moved, ctx = trilinear_sample(outer, spatial_grid(inner.shape[2:]) + inner, padding)
    return inner + moved, ctx


def compose_backward(g, ctx):
    """Returns (d_outer, d_inner)."""
    if ctx is None:
        return g, g
    d_outer, d_coords = trilinear_sample_backward(g, ctx)
    return d_outer, g + d_coords


# --------------------------------------------------------------- upsample


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation from n_in to n_out samples with fine index t at coarse t*n_in/n_out.

    The end cells are extended linearly, so affine fields are reproduced exactly.
    """
    U = np.zeros((n_out, n_in))
    if n_in == 1:
        U[:, 0] = 1.0
        return U
    s = np.arange(n_out) * (n_in / n_out)
    i0 = np.clip(np.floor(s).astype(int), 0, n_in - 2)
    f = s - i0
    U[np.arange(n_out), i0] = 1.0 - f
    U[np.arange(n_out), i0 + 1] = f
    return U


def upsample_displacement(psi: np.ndarray, target_shape):
    """Resample a coarse field onto a finer grid and rescale to the finer voxel units."""
    _check_field(psi)
    target_shape = tuple(int(t) for t in target_shape)
    src_shape = psi.shape[2:]
    if len(target_shape) != 3 or any(t < s for t, s in zip(target_shape, src_shape)):
        raise ShapeError(f"cannot upsample {src_shape} to {target_shape}")
    mats = [_interp_matrix(t, s) for t, s in zip(target_shape, src_shape)]
    ratio = np.array([t / s for t, s in zip(target_shape, src_shape)])
    out = np.einsum("Zz,nczyx->ncZyx", mats[0], psi)
    out = np.einsum("Yy,nczyx->nczYx", mats[1], out)
    out = np.einsum("Xx,nczyx->nczyX", mats[2], out)
    return out * ratio.reshape(1, 3, 1, 1, 1), (mats, ratio)


def upsample_displacement_backward(g, ctx):
    mats, ratio = ctx
    g = g * ratio.reshape(1, 3, 1, 1, 1)
    g = np.einsum("Xx,nczyX->nczyx", mats[2], g)
    g = np.einsum("Yy,nczYx->nczyx", mats[1], g)
    return np.einsum("Zz,ncZyx->nczyx", mats[0], g)


# ----------------------------------------------------------------- affine


def identity_affine() -> np.ndarray:
    return np.hstack([np.eye(3), np.zeros((3, 1))])


def base_rotation() -> np.ndarray:
    """90 degrees about y in (z, y, x) order: z_src = x_tgt, x_src = -z_tgt."""
    return np.array([[0.0, 0.0, 1.0, 0.0],
                     [0.0, 1.0, 0.0, 0.0],
                     [-1.0, 0.0, 0.0, 0.0]])


def affine_compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Matrix product of 3x4 affines (as 4x4 homogeneous), batched on leading axes."""
    lin = outer[..., :3] @ inner[..., :3]
    t = outer[..., :3] @ inner[..., 3:] + outer[..., 3:]
    return np.concatenate([lin, t], axis=-1)


def _frame_scale(frame, stride):
    """Per-axis (N - 1, stride) as (1, 3, 1) arrays; singleton axes use 1 to stay finite."""
    N = np.asarray(frame, dtype=float).reshape(1, 3, 1)
    return np.maximum(N - 1.0, 1.0), np.asarray(stride, dtype=float).reshape(1, 3, 1), N - 1.0


def _norm_coords(points, frame, stride):
    """Level-grid points -> normalized frame coords [u_z, u_y, u_x, 1]; the first
    and last frame voxel centers sit at -1 and +1."""
    n = points.shape[0]
    pts = points.reshape(n, 3, -1)
    den, s, span = _frame_scale(frame, stride)
    u = (2.0 * pts * s - span) / den
    return np.concatenate([u, np.ones((n, 1, pts.shape[2]))], axis=1)


def affine_displacement(A: np.ndarray, points: np.ndarray, frame, stride=(1, 1, 1)):
    """Displacement of an affine acting in normalized coordinates of ``frame``.

    ``points`` (n, 3, ...) are in voxel units of a grid whose voxel j sits
    at frame voxel j * stride.  Normalization maps frame voxel q to
    u = 2 q / (N - 1) - 1.  The result is computed from (A - I) directly so
    the identity yields exactly zero.
    """
    A = np.asarray(A, dtype=float)
    n = points.shape[0]
    if A.ndim == 2:
        A = np.broadcast_to(A, (n, 3, 4))
    if A.shape != (n, 3, 4):
        raise ShapeError(f"affine must be (n, 3, 4), got {A.shape}")
    ut = _norm_coords(points, frame, stride)
    M = A - identity_affine()
    den, st, _ = _frame_scale(frame, stride)
    scale = den / (2.0 * st)
    d = np.matmul(M, ut) * scale
    return d.reshape(points.shape), (ut, M, scale, frame, stride, points.shape)


def affine_displacement_backward(g, ctx):
    """Returns (d_A (n, 3, 4), d_points)."""
    ut, M, scale, frame, stride, pshape = ctx
    n = pshape[0]
    gs = g.reshape(n, 3, -1) * scale
    dA = np.matmul(gs, ut.transpose(0, 2, 1))
    du = np.matmul(M[:, :, :3].transpose(0, 2, 1), gs)
    den, st, _ = _frame_scale(frame, stride)
    dpts = du * (2.0 * st / den)
    return dA, dpts.reshape(pshape)


def affine_grid(A: np.ndarray, target_shape, frame=None, stride=(1, 1, 1), n: int | None = None):
    """Source voxel coordinates (n, 3, z, y, x) for every target voxel."""
    A = np.asarray(A, dtype=float)
    if n is None:
        n = A.shape[0] if A.ndim == 3 else 1
    grid = spatial_grid(target_shape, n)
    d, ctx = affine_displacement(A, grid, target_shape if frame is None else frame, stride)
    return grid + d, ctx


# ------------------------------------------------------------ tape wrappers


def _sample_fwd(src, coords, padding):
    return trilinear_sample(src, coords, padding)


def sample_var(src, coords, padding: str = "zeros") -> Var:
    return apply(_sample_fwd, trilinear_sample_backward, [src, coords], padding=padding)


def warp_var(src, psi) -> Var:
    return apply(warp, warp_backward, [src, psi])


def _compose_fwd(outer, inner, additive, padding):
    return compose(outer, inner, additive, padding)


def compose_var(outer, inner, additive: bool = False, padding: str = "border") -> Var:
    return apply(_compose_fwd, compose_backward, [outer, inner], additive=additive, padding=padding)


def _up_bwd(g, ctx):
    return (upsample_displacement_backward(g, ctx),)


def upsample_var(psi, target_shape) -> Var:
    return apply(upsample_displacement, _up_bwd, [psi], target_shape=target_shape)


def _affd_fwd(A, points, frame, stride):
    return affine_displacement(A, points, frame, stride)


def affine_displacement_var(A, points, frame, stride=(1, 1, 1)) -> Var:
    return apply(_affd_fwd, affine_displacement_backward, [A, points], frame=frame, stride=stride)


def _affc_fwd(outer, inner):
    return affine_compose(outer, inner), (outer, inner)


def _affc_bwd(g, ctx):
    outer, inner = ctx
    # lin = Ro Li ; t = Ro ti + to
    d_outer = np.zeros(np.broadcast_shapes(outer.shape, g.shape))
    d_outer[..., :3] = g[..., :3] @ np.swapaxes(inner[..., :3], -1, -2) \
        + g[..., 3:] @ np.swapaxes(inner[..., 3:], -1, -2)
    d_outer[..., 3:] = g[..., 3:]
    d_inner = np.zeros(np.broadcast_shapes(inner.shape, g.shape))
    ro_t = np.swapaxes(outer[..., :3], -1, -2)
    d_inner[..., :3] = ro_t @ g[..., :3]
    d_inner[..., 3:] = ro_t @ g[..., 3:]
    return _unbroadcast(d_outer, outer.shape), _unbroadcast(d_inner, inner.shape)


def affine_compose_var(outer, inner) -> Var:
    return apply(_affc_fwd, _affc_bwd, [outer, inner])
