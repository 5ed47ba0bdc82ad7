"""Kernel footprints: the full K^3 cube and the z-contracted pyramid subset,
plus normalized 3-D Sobel kernels."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

Offset = tuple[int, int, int]


@dataclass(frozen=True)
class PyramidFootprint:
    """Offsets are (dz, dy, dx), lexicographically ordered.

    ``pyramid`` keeps offsets with |dy|, |dx| <= m - |dz| where m = K // 2, so
    the in-plane window shrinks by one ring per slice away from the center.
    """

    k: int
    cube: tuple[Offset, ...]
    pyramid: tuple[Offset, ...]

    @property
    def radius(self) -> int:
        return self.k // 2

    @property
    def center_index(self) -> int:
        return self.cube.index((0, 0, 0))

    def mask(self, offsets: tuple[Offset, ...] | None = None) -> np.ndarray:
        """(K, K, K) indicator of ``offsets`` (default: the pyramid)."""
        m = np.zeros((self.k,) * 3)
        r = self.radius
        for dz, dy, dx in self.pyramid if offsets is None else offsets:
            m[dz + r, dy + r, dx + r] = 1.0
        return m


def footprint(k: int) -> PyramidFootprint:
    if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {k!r}")
    m = k // 2
    rng = range(-m, m + 1)
    cube = tuple(itertools.product(rng, rng, rng))
    pyramid = tuple(o for o in cube if abs(o[1]) <= m - abs(o[0]) and abs(o[2]) <= m - abs(o[0]))
    return PyramidFootprint(int(k), cube, pyramid)


def pyramid_size(k: int) -> int:
    m = k // 2
    return sum((2 * (m - abs(z)) + 1) ** 2 for z in range(-m, m + 1))


def gradient_kernels_3d() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sobel kernels (x, y, z) indexed [dz, dy, dx], scaled so a unit ramp gives 1.

    Applied as cross-correlation: response(v) = sum_d k[d] * T(v + d).
    """
    deriv = np.array([-1.0, 0.0, 1.0])
    smooth = np.array([1.0, 2.0, 1.0])
    kx = np.einsum("i,j,k->ijk", smooth, smooth, deriv) / 32.0
    ky = np.einsum("i,j,k->ijk", smooth, deriv, smooth) / 32.0
    kz = np.einsum("i,j,k->ijk", deriv, smooth, smooth) / 32.0
    return kx, ky, kz
