import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from abpdcnet.footprint import footprint, gradient_kernels_3d, pyramid_size


def brute_pyramid(k):
    m = k // 2
    out = []
    for dz, dy, dx in itertools.product(range(-m, m + 1), repeat=3):
        ring = m - abs(dz)
        if abs(dy) <= ring and abs(dx) <= ring:
            out.append((dz, dy, dx))
    return out


@pytest.mark.parametrize("k,size", [(1, 1), (3, 11), (5, 45), (7, 119)])
def test_pyramid_matches_enumeration(k, size):
    fp = footprint(k)
    assert list(fp.pyramid) == brute_pyramid(k)
    assert len(fp.pyramid) == size == pyramid_size(k)
    assert len(fp.cube) == k ** 3


def test_pyramid_k3_layers():
    fp = footprint(3)
    assert [o for o in fp.pyramid if o[0] != 0] == [(-1, 0, 0), (1, 0, 0)]
    assert sum(1 for o in fp.pyramid if o[0] == 0) == 9


@pytest.mark.parametrize("k", [0, 2, 4, -3, 3.0])
def test_invalid_kernel_size(k):
    with pytest.raises(ValueError):
        footprint(k)


@given(st.sampled_from([1, 3, 5, 7, 9]))
def test_pyramid_symmetric_and_contains_center(k):
    fp = footprint(k)
    s = set(fp.pyramid)
    assert (0, 0, 0) in s
    assert all((-a, -b, -c) in s for a, b, c in s)
    assert s <= set(fp.cube)
    assert fp.mask().sum() == len(fp.pyramid)


def test_gradient_kernels_unit_ramp():
    kx, ky, kz = gradient_kernels_3d()
    z, y, x = np.meshgrid(*[np.arange(-1.0, 2.0)] * 3, indexing="ij")
    for k, ramp, others in ((kx, x, (y, z)), (ky, y, (x, z)), (kz, z, (x, y))):
        assert np.sum(k * ramp) == pytest.approx(1.0, abs=1e-15)
        for o in others:
            assert np.sum(k * o) == pytest.approx(0.0, abs=1e-15)
        assert np.sum(k) == pytest.approx(0.0, abs=1e-15)
    # the x kernel is antisymmetric in x and symmetric in y, z
    np.testing.assert_array_equal(kx, -kx[:, :, ::-1])
    np.testing.assert_array_equal(kx, kx[::-1])
