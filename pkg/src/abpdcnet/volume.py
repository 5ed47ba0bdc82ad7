"""Rank-5 volumes, parameter registry, RNG, VOL5 serialization and the
finite-difference gradient oracle.

Every image, feature map and gradient in the package is a plain
``numpy.ndarray`` with axes ``(n, c, z, y, x)``; x varies fastest.
"""
from __future__ import annotations

import struct
from contextlib import nullcontext
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import FormatError, NumericError, ShapeError
from .kinks import record_kinks, same_branches

FLOAT = np.float64

VOL5_MAGIC = b"VOL5"
VOL5_VERSION = 1
# magic(4) | version u8 | 5 x u32 dims, all little-endian; payload is f64 LE.
_VOL5_HEADER = struct.Struct("<4sB5I")


def volume_new(shape: Sequence[int], fill: float = 0.0, dtype=FLOAT) -> np.ndarray:
    """Allocate an (n, c, z, y, x) volume filled with ``fill``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 5:
        raise ShapeError(f"expected a 5-tuple shape, got {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return np.full(shape, fill, dtype=dtype)


def check_volume(v: np.ndarray, name: str = "volume", channels: int | None = None) -> np.ndarray:
    if not isinstance(v, np.ndarray) or v.ndim != 5:
        raise ShapeError(f"{name}: expected a rank-5 array, got {getattr(v, 'shape', type(v))}")
    if channels is not None and v.shape[1] != channels:
        raise ShapeError(f"{name}: expected {channels} channels, got {v.shape[1]}")
    return v


def check_finite(v: np.ndarray, name: str = "volume") -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{name} contains non-finite values")
    return v


def spatial_grid(shape: Sequence[int], n: int = 1, dtype=FLOAT) -> np.ndarray:
    """Voxel-center coordinates as an (n, 3, z, y, x) volume of (z, y, x) indices."""
    d, h, w = (int(s) for s in shape)
    zz, yy, xx = np.meshgrid(np.arange(d, dtype=dtype), np.arange(h, dtype=dtype),
                             np.arange(w, dtype=dtype), indexing="ij")
    grid = np.stack([zz, yy, xx])[None]
    return np.repeat(grid, n, axis=0) if n > 1 else grid


# --------------------------------------------------------------------- RNG


class Rng:
    """Seeded generator backed by numpy's PCG64 bit generator.

    PCG64 (O'Neill's permuted congruential generator, 128-bit LCG state with
    multiplier 0x2360ED051FC65DA44385DF649FCCF645 and an XSL-RR output
    permutation) has a frozen, platform-independent stream, and
    ``Generator.random``/``standard_normal`` on top of it are covered by
    numpy's stream-compatibility policy.  Derived streams use
    ``SeedSequence((seed, *keys))`` so workers keyed by case index get
    independent, reproducible streams.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.keys = tuple(int(k) for k in keys)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence((self.seed, *self.keys))))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# -------------------------------------------------------------- ParamStore


class ParamStore:
    """Named learnable arrays, each paired with a gradient buffer of the same shape."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"parameter {name!r} already registered")
        value = np.array(value, dtype=FLOAT)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def grad(self, name: str) -> np.ndarray:
        try:
            return self._grads[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def set(self, name: str, value: np.ndarray) -> None:
        cur = self[name]
        value = np.asarray(value, dtype=FLOAT)
        if value.shape != cur.shape:
            raise ShapeError(f"{name}: shape {value.shape} != registered {cur.shape}")
        cur[...] = value

    def accumulate(self, name: str, g: np.ndarray) -> None:
        buf = self.grad(name)
        if g.shape != buf.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != {buf.shape}")
        buf += g

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def num_elements(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self._values.items():
            out.add(k, v.copy())
            out._grads[k][...] = self._grads[k]
        return out


# ------------------------------------------------------ finite differences


def finite_diff_gradient(f: Callable[[ParamStore], float], params: ParamStore, name: str,
                         eps: float = 1e-5, indices: Sequence[int] | None = None,
                         skip_kinks: bool = False) -> np.ndarray:
    """Central-difference estimate of df/d(params[name]).

    ``indices`` restricts the probe to some flat element indices; the other
    entries of the returned array are NaN.  With ``skip_kinks`` a probe is
    also NaN when the two evaluations took different branches at a ReLU or
    sampler cell boundary.  The parameter is restored exactly after each probe.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = params[name]
    flat = x.reshape(-1)
    out = np.full(x.shape, np.nan) if indices is not None else np.empty(x.shape)
    out_flat = out.reshape(-1)
    watch = record_kinks if skip_kinks else (lambda: nullcontext([]))
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + eps
        with watch() as kp:
            fp = float(f(params))
        flat[i] = orig - eps
        with watch() as km:
            fm = float(f(params))
        flat[i] = orig
        if skip_kinks and not same_branches(kp, km):
            out_flat[i] = np.nan
        else:
            out_flat[i] = (fp - fm) / (2.0 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over the finite entries of ``numeric``."""
    mask = np.isfinite(numeric)
    a = np.asarray(analytic)[mask]
    n = np.asarray(numeric)[mask]
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


# -------------------------------------------------------------------- VOL5


def vol5_bytes(vol: np.ndarray) -> bytes:
    check_volume(vol)
    header = _VOL5_HEADER.pack(VOL5_MAGIC, VOL5_VERSION, *vol.shape)
    return header + np.ascontiguousarray(vol, dtype="<f8").tobytes()


def vol5_from_bytes(buf: bytes, exact: bool = True) -> tuple[np.ndarray, int]:
    """Decode one VOL5 record; returns the volume and the bytes consumed.

    With ``exact`` the buffer must hold exactly one record.
    """
    if len(buf) < 4 or buf[:4] != VOL5_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {VOL5_MAGIC!r}")
    if len(buf) < _VOL5_HEADER.size:
        raise FormatError("truncated VOL5 header")
    _, version, *dims = _VOL5_HEADER.unpack_from(buf)
    if version != VOL5_VERSION:
        raise FormatError(f"unsupported VOL5 version {version}")
    if any(d < 1 for d in dims):
        raise FormatError(f"invalid dims {dims} in header")
    count = int(np.prod(dims, dtype=np.int64))
    end = _VOL5_HEADER.size + 8 * count
    avail = len(buf) - _VOL5_HEADER.size
    if avail < 8 * count:
        raise FormatError(f"truncated payload: header declares {count} elements, "
                          f"payload holds {avail // 8}")
    if exact and len(buf) != end:
        raise FormatError(f"payload holds {avail // 8} elements, header declares {count}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=_VOL5_HEADER.size)
    return data.astype(FLOAT).reshape(dims), end


def volume_io_write(path: str | Path, vol: np.ndarray) -> None:
    Path(path).write_bytes(vol5_bytes(vol))


def volume_io_read(path: str | Path) -> np.ndarray:
    vol, _ = vol5_from_bytes(Path(path).read_bytes())
    return vol
