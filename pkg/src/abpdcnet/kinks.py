"""Records which side of each non-smooth point (ReLU threshold, sampler
cell boundary, border clamp) a forward pass landed on.

Finite-difference checks use it to drop probes whose two evaluations
straddle such a point, where a central difference is meaningless.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_active: list | None = None


@contextmanager
def record_kinks():
    """Collect a list of integer arrays describing every kink-relevant branch."""
    global _active
    outer, _active = _active, []
    try:
        yield _active
    finally:
        _active = outer


def note_kink(arr) -> None:
    if _active is not None:
        _active.append(np.array(arr, dtype=np.int64, copy=True))


def same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))
