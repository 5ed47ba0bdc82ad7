"""Synthetic MRI/CT pairs with exact ground-truth displacement.

The MRI is an analytic sum of Gaussian blobs in normalized coordinates
(optionally plus a bright "lesion" blob, which sets label 1).  A CT voxel w
shows the MRI point v that the forward map sends there:

    w = rot(v) + delta(v)

where rot is the base re-orientation affine and delta a smooth nonrigid
displacement.  The target field for the pull warp is therefore
psi_total(v) = rot(v) - v + delta(v), i.e. CT(v + psi_total(v)) = remap(MRI(v)).
For every CT voxel the equation is solved for v by fixed-point iteration
and the MRI expression is evaluated there, so no interpolation enters the
ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .volume import Rng, spatial_grid
from .warp import affine_displacement, base_rotation, identity_affine

DISPLACEMENTS = ("smooth", "translation", "none")
REMAPS = ("affine", "gamma", "invert", "identity")


@dataclass(frozen=True)
class GenConfig:
    shape: tuple[int, int, int] = (16, 64, 64)
    divisor: tuple[int, int, int] = (4, 16, 16)  # cumulative backbone stride
    n_blobs: int = 300
    # per-axis (z, y, x) range of blob widths in normalized units; x stays
    # wide because the re-orientation squeezes it into the short z axis
    blob_sigma: tuple = ((0.1, 0.2), (0.05, 0.1), (0.25, 0.45))
    lesion_amplitude: float = 1.5
    lesion_sigma: float = 0.12
    positive_fraction: float = 0.5
    displacement: str = "smooth"
    psi_max: float = 3.0  # bound on |delta| in voxels
    field_bumps: int = 2
    field_sigma: float = 1.5  # normalized units
    translation: tuple[float, float, float] = (0.0, 0.0, 2.0)
    rotation: bool = True
    remap: str = "affine"
    remap_scale: float = 0.7  # affine remap: b = offset + scale * a
    remap_offset: float = 0.2
    gamma: float = 1.5
    noise: float = 0.01

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"shape must be three positive ints, got {self.shape}")
        if any(n % d for n, d in zip(self.shape, self.divisor)):
            raise ConfigError(f"shape {self.shape} not divisible by {self.divisor}")
        if self.displacement not in DISPLACEMENTS:
            raise ConfigError(f"displacement must be one of {DISPLACEMENTS}")
        if self.remap not in REMAPS:
            raise ConfigError(f"remap must be one of {REMAPS}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigError("positive_fraction must lie in [0, 1]")
        if self.psi_max < 0 or self.noise < 0 or self.gamma <= 0:
            raise ConfigError("psi_max and noise must be >= 0, gamma > 0")


@dataclass
class SyntheticCase:
    mri: np.ndarray  # (1, 1, z, y, x), values in [0, 1]
    ct: np.ndarray  # (1, 1, z, y, x)
    ct_clean: np.ndarray  # ct before noise
    psi_star: np.ndarray  # (1, 3, z, y, x) nonrigid part delta, voxels
    psi_total: np.ndarray  # rotation + delta; CT(v + psi_total(v)) = remap(MRI(v))
    label: int


def _to_norm(points: np.ndarray, shape) -> np.ndarray:
    span = np.asarray(shape, dtype=float).reshape(3, *([1] * (points.ndim - 1))) - 1.0
    return (2.0 * points - span) / np.maximum(span, 1.0)


class _Blobs:
    """Sum of axis-aligned Gaussians evaluated at arbitrary normalized points."""

    def __init__(self, centers, sigmas, amps):
        self.centers, self.sigmas, self.amps = centers, sigmas, amps

    def __call__(self, u: np.ndarray) -> np.ndarray:
        out = np.zeros(u.shape[1:] + self.amps.shape[1:])
        for c, s, a in zip(self.centers, self.sigmas, self.amps):
            r2 = sum(((u[i] - c[i]) / s[i]) ** 2 for i in range(3))
            g = np.exp(-0.5 * r2)
            out += g[..., None] * a if a.ndim else g * a
        return out


def _texture(rng: Rng, cfg: GenConfig, lesion: bool) -> _Blobs:
    n = cfg.n_blobs
    centers = rng.uniform(-1.1, 1.1, (n, 3))
    lo, hi = np.broadcast_to(np.asarray(cfg.blob_sigma, dtype=float).reshape(-1, 2), (3, 2)).T
    sigmas = rng.uniform(lo, hi, (n, 3))
    amps = rng.uniform(0.3, 1.0, n) * np.where(rng.random(n) < 0.5, -1.0, 1.0)
    if lesion:
        centers = np.vstack([centers, rng.uniform(-0.5, 0.5, (1, 3))])
        sigmas = np.vstack([sigmas, np.full((1, 3), cfg.lesion_sigma)])
        amps = np.append(amps, cfg.lesion_amplitude)
    return _Blobs(centers, sigmas, amps)


def _nonrigid(rng: Rng, cfg: GenConfig):
    """delta as a function of normalized MRI coords, or None."""
    if cfg.displacement == "none" or cfg.psi_max == 0:
        return None
    if cfg.displacement == "translation":
        t = np.asarray(cfg.translation, dtype=float)
        if np.linalg.norm(t) > cfg.psi_max + 1e-12:
            raise ConfigError(f"translation {tuple(t)} exceeds psi_max {cfg.psi_max}")
        return lambda u: np.broadcast_to(t.reshape(3, *([1] * (u.ndim - 1))), u.shape)
    k = cfg.field_bumps
    bumps = _Blobs(rng.uniform(-1.0, 1.0, (k, 3)), np.full((k, 3), cfg.field_sigma),
                   rng.normal(0.0, 1.0, (k, 3)))

    def raw(u):
        taper = np.prod(np.clip(1.0 - u ** 4, 0.0, None), axis=0)
        return np.moveaxis(bumps(u), -1, 0) * taper

    # each component peaks at its share of independent samples along that
    # CT axis (the re-orientation swaps z and x content), then the whole
    # field is scaled to peak at psi_max; bounded per-axis amplitudes keep
    # the map invertible and the taper keeps the volume boundary fixed
    grid = _to_norm(spatial_grid(cfg.shape)[0], cfg.shape)
    field = raw(grid)
    comp = np.abs(field).reshape(3, -1).max(axis=1)
    extent = np.asarray(resolved_samples(cfg), dtype=float) / max(cfg.shape)
    axis_scale = np.where(comp > 0, extent / np.where(comp > 0, comp, 1.0), 0.0).reshape(3, 1, 1, 1)
    peak = np.sqrt(((field * axis_scale) ** 2).sum(axis=0)).max()
    scale = axis_scale.reshape(3) * (cfg.psi_max / peak if peak > 0 else 0.0)
    return lambda u: raw(u) * scale.reshape((3,) + (1,) * (u.ndim - 1))


def resolved_samples(cfg: GenConfig) -> tuple[int, int, int]:
    """Independent samples per CT axis: an axis fed by a shorter MRI axis
    carries no more detail than that axis has voxels."""
    z, y, x = cfg.shape
    return (min(z, x), y, min(z, x)) if cfg.rotation else (z, y, x)


def _remap(a: np.ndarray, cfg: GenConfig) -> np.ndarray:
    if cfg.remap == "identity":
        return a
    if cfg.remap == "affine":
        return cfg.remap_offset + cfg.remap_scale * a
    b = np.clip(a, 0.0, 1.0) ** cfg.gamma
    return 1.0 - b if cfg.remap == "invert" else b


def _affine(cfg: GenConfig) -> np.ndarray:
    return base_rotation() if cfg.rotation else identity_affine()


def _inverse_affine(A: np.ndarray) -> np.ndarray:
    H = np.vstack([A, [0.0, 0.0, 0.0, 1.0]])
    return np.linalg.inv(H)[:3]


def _point_map(A: np.ndarray, pts: np.ndarray, shape) -> np.ndarray:
    """Apply an affine (normalized-coordinate convention) to voxel points (3, ...)."""
    d, _ = affine_displacement(A, pts[None], shape)
    return pts + d[0]


def _solve_source(w: np.ndarray, A: np.ndarray, delta, shape, iters: int = 50, tol: float = 1e-10):
    """v with rot(v) + delta(v) = w, by Newton's method.

    The Jacobian of delta comes from central differences; the residual is
    evaluated exactly, so only the convergence rate depends on it.
    """
    v = _point_map(_inverse_affine(A), w, shape)
    if delta is None:
        return v
    basis = np.hstack([np.zeros((3, 1)), np.eye(3)])
    mapped = _point_map(A, basis, shape)
    lin = mapped[:, 1:] - mapped[:, :1]  # voxel-unit Jacobian of the affine
    h = 1e-3
    for _ in range(iters):
        resid = _point_map(A, v, shape) + delta(_to_norm(v, shape)) - w
        if np.abs(resid).max() < tol:
            return v
        jac = np.empty((3, 3) + v.shape[1:])
        for j in range(3):
            step = np.zeros((3,) + (1,) * (v.ndim - 1))
            step[j] = h
            jac[:, j] = lin[:, j].reshape((3,) + (1,) * (v.ndim - 1)) + (
                delta(_to_norm(v + step, shape)) - delta(_to_norm(v - step, shape))) / (2 * h)
        J = np.moveaxis(jac.reshape(3, 3, -1), -1, 0)
        if np.any(np.linalg.det(J) <= 0):
            raise ConfigError("synthetic displacement folds; reduce psi_max or widen field_sigma")
        dv = np.linalg.solve(J, resid.reshape(3, -1).T[..., None])[..., 0]
        v = v - dv.T.reshape(v.shape)
    raise ConfigError("ground-truth inversion did not converge; reduce psi_max or widen field_sigma")


def generate_case(rng: Rng, cfg: GenConfig = GenConfig(), label: int | None = None) -> SyntheticCase:
    """One (MRI, CT, ground truth, label) sample, deterministic in ``rng``."""
    if label is None:
        label = int(rng.random() < cfg.positive_fraction)
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    lesion = bool(label) and cfg.lesion_amplitude != 0
    label = int(lesion)
    blobs = _texture(rng, cfg, lesion)
    delta = _nonrigid(rng, cfg)
    grid = spatial_grid(cfg.shape)[0]

    raw = blobs(_to_norm(grid, cfg.shape))
    lo, hi = raw.min(), raw.max()
    span = hi - lo if hi > lo else 1.0
    mri = (raw - lo) / span

    A = _affine(cfg)
    src = _solve_source(grid, A, delta, cfg.shape)
    ct_clean = _remap((blobs(_to_norm(src, cfg.shape)) - lo) / span, cfg)
    ct = ct_clean + cfg.noise * rng.normal(0.0, 1.0, ct_clean.shape) if cfg.noise else ct_clean.copy()

    psi_star = np.zeros((3, *cfg.shape)) if delta is None else np.array(delta(_to_norm(grid, cfg.shape)))
    psi_total = _point_map(A, grid, cfg.shape) - grid + psi_star
    return SyntheticCase(mri[None, None], ct[None, None], ct_clean[None, None],
                         psi_star[None], psi_total[None], label)


def generate_dataset(seed: int, count: int, cfg: GenConfig = GenConfig(), stream: int = 0) -> list[SyntheticCase]:
    """``count`` cases with exactly round(count * positive_fraction) positives.

    Case i draws from its own stream keyed by (seed, stream, i), so any case
    can be regenerated on its own.
    """
    npos = int(round(count * cfg.positive_fraction))
    labels = np.zeros(count, dtype=int)
    labels[Rng(seed, stream, 1 << 20).permutation(count)[:npos]] = 1
    return [generate_case(Rng(seed, stream, i), cfg, int(labels[i])) for i in range(count)]


def stack(cases: list[SyntheticCase]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays (ct, mri, labels)."""
    return (np.concatenate([c.ct for c in cases]), np.concatenate([c.mri for c in cases]),
            np.array([c.label for c in cases]))
