"""Dense building blocks with explicit backward passes: strided 3-D
convolution via im2col, instance normalization, pointwise projections,
pooling and box filters."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ShapeError
from .tape import Var, apply


def _triple(s) -> tuple[int, int, int]:
    if np.isscalar(s):
        return (int(s),) * 3
    s = tuple(int(v) for v in s)
    if len(s) != 3:
        raise ShapeError(f"expected a per-axis triple, got {s}")
    return s


def conv_output_shape(spatial, k: int, stride) -> tuple[int, int, int]:
    p = k // 2
    return tuple((n + 2 * p - k) // s + 1 for n, s in zip(spatial, _triple(stride)))


def im2col(x: np.ndarray, k: int, stride=1) -> np.ndarray:
    """(n, c, D, H, W) -> (n, c, k^3, Do, Ho, Wo) with zero padding k // 2.

    Offsets run lexicographically over (dz, dy, dx), matching
    ``PyramidFootprint.cube`` and a C-order reshape of the kernel.
    """
    sz, sy, sx = _triple(stride)
    p = k // 2
    n, c = x.shape[:2]
    do, ho, wo = conv_output_shape(x.shape[2:], k, (sz, sy, sx))
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    cols = np.empty((n, c, k ** 3, do, ho, wo), dtype=x.dtype)
    i = 0
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                cols[:, :, i] = xp[:, :, kz:kz + sz * (do - 1) + 1:sz,
                                   ky:ky + sy * (ho - 1) + 1:sy,
                                   kx:kx + sx * (wo - 1) + 1:sx]
                i += 1
    return cols


def col2im(dcols: np.ndarray, x_shape, k: int, stride=1) -> np.ndarray:
    """Adjoint of :func:`im2col`."""
    sz, sy, sx = _triple(stride)
    p = k // 2
    n, c, d, h, w = x_shape
    do, ho, wo = dcols.shape[3:]
    dxp = np.zeros((n, c, d + 2 * p, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    i = 0
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                dxp[:, :, kz:kz + sz * (do - 1) + 1:sz,
                    ky:ky + sy * (ho - 1) + 1:sy,
                    kx:kx + sx * (wo - 1) + 1:sx] += dcols[:, :, i]
                i += 1
    return dxp[:, :, p:p + d, p:p + h, p:p + w]


def _batch_outer(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sum_n g[n] @ x[n].T for (n, a, V) and (n, b, V); avoids transposed copies."""
    out = g[0] @ x[0].T
    for i in range(1, g.shape[0]):
        out += g[i] @ x[i].T
    return out


# ------------------------------------------------------------ convolution


def conv3d_forward(x, w, b=None, stride=1):
    """Cross-correlation with zero padding K // 2; ``w`` is (co, ci, K, K, K)."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects rank-5 input and kernel, got {x.shape}, {w.shape}")
    co, ci, k = w.shape[:3]
    if x.shape[1] != ci:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, kernel expects {ci}")
    stride = _triple(stride)
    cols = im2col(x, k, stride)
    n = x.shape[0]
    osp = cols.shape[3:]
    out = np.matmul(w.reshape(co, -1), cols.reshape(n, ci * k ** 3, -1)).reshape(n, co, *osp)
    if b is not None:
        out += b.reshape(1, co, 1, 1, 1)
    return out, (cols, x.shape, w, stride, b is not None)


def conv3d_backward(g, ctx):
    cols, x_shape, w, stride, has_bias = ctx
    n = g.shape[0]
    co, ci, k = w.shape[:3]
    g2 = g.reshape(n, co, -1)
    c2 = cols.reshape(n, ci * k ** 3, -1)
    dw = _batch_outer(g2, c2).reshape(w.shape)
    dcols = np.matmul(w.reshape(co, -1).T, g2).reshape(cols.shape)
    dx = col2im(dcols, x_shape, k, stride)
    db = g.sum(axis=(0, 2, 3, 4)) if has_bias else None
    return dx, dw, db


def _conv_fwd(x, w, *b, stride):
    return conv3d_forward(x, w, b[0] if b else None, stride)


def _conv_bwd(g, ctx):
    dx, dw, db = conv3d_backward(g, ctx)
    return (dx, dw) if db is None else (dx, dw, db)


def conv3d(x, w, b=None, stride=1) -> Var:
    inputs = [x, w] if b is None else [x, w, b]
    return apply(_conv_fwd, _conv_bwd, inputs, stride=stride)


# -------------------------------------------------------- instance norm


def instance_norm_forward(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=(2, 3, 4), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(2, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    c = x.shape[1]
    out = gamma.reshape(1, c, 1, 1, 1) * xh + beta.reshape(1, c, 1, 1, 1)
    return out, (xh, inv, gamma)


def instance_norm_backward(g, ctx):
    xh, inv, gamma = ctx
    c = g.shape[1]
    dgamma = (g * xh).sum(axis=(0, 2, 3, 4))
    dbeta = g.sum(axis=(0, 2, 3, 4))
    dxh = g * gamma.reshape(1, c, 1, 1, 1)
    m = dxh.mean(axis=(2, 3, 4), keepdims=True)
    mx = (dxh * xh).mean(axis=(2, 3, 4), keepdims=True)
    dx = inv * (dxh - m - xh * mx)
    return dx, dgamma, dbeta


def instance_norm(x, gamma, beta, eps=1e-5) -> Var:
    return apply(instance_norm_forward, instance_norm_backward, [x, gamma, beta], eps=eps)


# ------------------------------------------------- pointwise projections


def pointwise_forward(x, w, b=None):
    """Per-voxel linear map: (n, ci, ...) -> (n, co, ...) with ``w`` (co, ci)."""
    n, ci = x.shape[:2]
    if w.shape[1] != ci:
        raise ShapeError(f"pointwise: input has {ci} channels, weight expects {w.shape[1]}")
    x2 = x.reshape(n, ci, -1)
    out = np.matmul(w, x2)
    if b is not None:
        out += b.reshape(1, -1, 1)
    return out.reshape(n, w.shape[0], *x.shape[2:]), (x2, x.shape, w, b is not None)


def pointwise_backward(g, ctx):
    x2, x_shape, w, has_bias = ctx
    n, co = g.shape[:2]
    g2 = g.reshape(n, co, -1)
    dw = _batch_outer(g2, x2)
    dx = np.matmul(w.T, g2).reshape(x_shape)
    db = g2.sum(axis=(0, 2)) if has_bias else None
    return dx, dw, db


def _pw_fwd(x, w, *b):
    return pointwise_forward(x, w, b[0] if b else None)


def _pw_bwd(g, ctx):
    dx, dw, db = pointwise_backward(g, ctx)
    return (dx, dw) if db is None else (dx, dw, db)


def pointwise(x, w, b=None) -> Var:
    return apply(_pw_fwd, _pw_bwd, [x, w] if b is None else [x, w, b])


def _gap_fwd(x):
    return x.mean(axis=tuple(range(2, x.ndim))), x.shape


def _gap_bwd(g, shape):
    nvox = int(np.prod(shape[2:]))
    return (np.broadcast_to((g / nvox).reshape(*g.shape, *([1] * (len(shape) - 2))), shape).copy(),)


def global_avg_pool(x) -> Var:
    """(n, c, ...) -> (n, c)."""
    return apply(_gap_fwd, _gap_bwd, [x])


def _linear_fwd(x, w, b):
    return x @ w.T + b, (x, w)


def _linear_bwd(g, ctx):
    x, w = ctx
    return g @ w, g.T @ x, g.sum(axis=0)


def linear(x, w, b) -> Var:
    """(n, i) @ (o, i).T + (o,)."""
    return apply(_linear_fwd, _linear_bwd, [x, w, b])


# ------------------------------------------------------------- box filters


def box_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Spatial mean over a ``window``^3 cube with zero padding (pad counted).

    The operator is symmetric, so it is its own adjoint.
    """
    if window == 1:
        return x.copy()
    size = (1,) * (x.ndim - 3) + (window,) * 3
    return uniform_filter(x, size=size, mode="constant", cval=0.0)


def box_sum(x: np.ndarray, window: int) -> np.ndarray:
    return box_mean(x, window) * float(window ** 3)
