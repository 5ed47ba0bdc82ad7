"""Adaptive bidirectional pyramid difference convolution.

    out(v) = (1 - theta(v)) * sum_{d in C} w(d) T(v + d)
           +      theta(v)  * sum_{d in S} w(d) (T(v + d) - T(v))

C is the full K^3 cube, S the z-contracted pyramid.  In adaptive mode
theta(v) = 1 - sigmoid(gate_scale * avgpool(G)(v) + gate_bias), with G the
Sobel gradient magnitude of the channel-averaged input, so blurred regions
lean on the difference term and sharp ones on the plain convolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d
from scipy.special import expit

from . import ops
from .errors import ConfigError, ShapeError, UsageError
from .footprint import PyramidFootprint
from .tape import Var, apply

MODES = ("adaptive", "fixed", "standard")
G_EPS = 1e-12


@dataclass
class AbpdcParams:
    weights: np.ndarray  # (out_c, in_c, K, K, K), shared by both sums
    gate_scale: float = 1.0
    gate_bias: float = 0.0
    mode: str = "adaptive"
    theta: float = 0.7  # used only in fixed mode

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown ABPDC mode {self.mode!r}")
        if self.mode == "fixed" and not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"fixed theta must lie in [0, 1], got {self.theta}")


_DERIV = np.array([-1.0, 0.0, 1.0])
_SMOOTH = np.array([1.0, 2.0, 1.0]) / 4.0
# per output (x, y, z): the 1-D taps along (z, y, x); together they equal
# gradient_kernels_3d() (the product of the scales is 1/32)
_SEPARABLE = [(_SMOOTH, _SMOOTH, _DERIV / 2.0),
              (_SMOOTH, _DERIV / 2.0, _SMOOTH),
              (_DERIV / 2.0, _SMOOTH, _SMOOTH)]


def _sobel(m: np.ndarray, which: int, adjoint: bool = False) -> np.ndarray:
    """Separable Sobel correlation of (n, 1, z, y, x) along axis ``which``
    (0=x, 1=y, 2=z); ``adjoint`` flips the taps."""
    r = m
    for axis, t in zip((2, 3, 4), _SEPARABLE[which]):
        r = correlate1d(r, t[::-1] if adjoint else t, axis=axis, mode="constant", cval=0.0)
    return r


def texture_strength(T: np.ndarray):
    """Per-voxel Sobel gradient magnitude of the channel mean, zero padded.

    Returns ``(G, ctx)`` with G of shape (n, 1, z, y, x).  The magnitude is
    sqrt(|grad|^2 + 1e-12) so its derivative stays finite on flat regions.
    """
    if T.ndim != 5:
        raise ShapeError(f"texture_strength expects a rank-5 volume, got {T.shape}")
    if min(T.shape[2:]) < 3:
        raise ShapeError(f"texture_strength needs spatial dims >= 3, got {T.shape[2:]}")
    m = T.mean(axis=1, keepdims=True)
    grads = np.concatenate([_sobel(m, i) for i in range(3)], axis=1)
    G = np.sqrt((grads * grads).sum(axis=1, keepdims=True) + G_EPS)
    return G, (grads, G, T.shape[1])


def texture_strength_backward(dG: np.ndarray, ctx) -> np.ndarray:
    grads, G, channels = ctx
    dgrads = dG * grads / G
    dm = sum(_sobel(dgrads[:, i:i + 1], i, adjoint=True) for i in range(3))
    return np.repeat(dm / channels, channels, axis=1)


def adaptive_theta(G: np.ndarray, gate_scale: float, gate_bias: float, pool_window: int = 3):
    """theta = 1 - sigmoid(gate_scale * boxmean(G) + gate_bias); returns (theta, ctx)."""
    if pool_window < 1 or pool_window % 2 == 0:
        raise ConfigError(f"pool_window must be odd and >= 1, got {pool_window}")
    P = ops.box_mean(G, pool_window)
    s = expit(gate_scale * P + gate_bias)
    return 1.0 - s, (P, s, float(gate_scale), pool_window)


def adaptive_theta_backward(dtheta: np.ndarray, ctx):
    """Returns (dG, d_gate_scale, d_gate_bias)."""
    P, s, gate_scale, pool_window = ctx
    dz = -dtheta * s * (1.0 - s)
    dP = dz * gate_scale
    return ops.box_mean(dP, pool_window), float((dz * P).sum()), float(dz.sum())


@dataclass
class AbpdcContext:
    out_shape: tuple
    cols: np.ndarray
    in_shape: tuple
    params: AbpdcParams
    stride: tuple
    k: int
    center_index: int
    mask: np.ndarray | None = None
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    theta: np.ndarray | None = None  # (n, 1, V) on the output grid
    theta_ctx: tuple | None = None
    texture_ctx: tuple | None = None
    theta_in_shape: tuple | None = None
    detach_theta: bool = False


def abpdc_forward(T: np.ndarray, p: AbpdcParams, fp: PyramidFootprint, stride=1,
                  pool_window: int = 3, detach_theta: bool = False, diff_offsets=None):
    """Forward pass; returns ``(out, ctx)``.

    ``diff_offsets`` overrides the difference-term support (default
    ``fp.pyramid``); passing ``fp.cube`` yields central difference convolution.
    """
    co, ci, k = p.weights.shape[:3]
    if p.weights.shape[2:] != (fp.k,) * 3:
        raise ConfigError(f"kernel {p.weights.shape[2:]} does not match footprint K={fp.k}")
    if T.ndim != 5 or T.shape[1] != ci:
        raise ShapeError(f"ABPDC input {T.shape} incompatible with kernel {p.weights.shape}")
    stride = ops._triple(stride)
    if any(s not in (1, 2) for s in stride):
        raise ConfigError(f"stride components must be 1 or 2, got {stride}")
    n = T.shape[0]
    k3 = k ** 3
    cols = ops.im2col(T, k, stride)
    osp = cols.shape[3:]
    c2 = cols.reshape(n, ci * k3, -1)
    w2 = p.weights.reshape(co, ci * k3)
    A = np.matmul(w2, c2)
    ctx = AbpdcContext((n, co, *osp), cols, T.shape, p, stride, k, fp.center_index,
                       detach_theta=detach_theta)
    if p.mode == "standard":
        return A.reshape(n, co, *osp), ctx

    mask = fp.mask(diff_offsets).reshape(k3)
    wm = p.weights.reshape(co, ci, k3) * mask
    center = cols[:, :, fp.center_index].reshape(n, ci, -1)
    B = np.matmul(wm.reshape(co, -1), c2) - np.matmul(wm.sum(axis=2), center)
    if p.mode == "fixed":
        theta = np.full((n, 1, A.shape[2]), float(p.theta))
    else:
        G, ctx.texture_ctx = texture_strength(T)
        theta_in, ctx.theta_ctx = adaptive_theta(G, p.gate_scale, p.gate_bias, pool_window)
        ctx.theta_in_shape = theta_in.shape
        sz, sy, sx = stride
        theta = theta_in[:, :, ::sz, ::sy, ::sx].reshape(n, 1, -1)
    out = A + theta * (B - A)
    ctx.mask, ctx.A, ctx.B, ctx.theta = mask, A, B, theta
    return out.reshape(n, co, *osp), ctx


def abpdc_backward(grad_out: np.ndarray, ctx: AbpdcContext) -> dict:
    """Analytic gradients ``{"T", "weights", "gate_scale", "gate_bias"}``.

    In adaptive mode ``T`` includes the path through theta -> G unless the
    forward call detached it.
    """
    if not isinstance(ctx, AbpdcContext):
        raise UsageError("abpdc_backward needs the context returned by abpdc_forward")
    if tuple(grad_out.shape) != tuple(ctx.out_shape):
        raise UsageError(f"grad_out shape {grad_out.shape} does not match the forward "
                         f"output {ctx.out_shape}; stale context?")
    p = ctx.params
    n, co = ctx.out_shape[:2]
    ci, k = ctx.in_shape[1], ctx.k
    k3 = k ** 3
    c2 = ctx.cols.reshape(n, ci * k3, -1)
    w2 = p.weights.reshape(co, ci * k3)
    g2 = grad_out.reshape(n, co, -1)
    d_scale = d_bias = 0.0

    if p.mode == "standard":
        dw = ops._batch_outer(g2, c2).reshape(p.weights.shape)
        dcols = np.matmul(w2.T, g2).reshape(ctx.cols.shape)
        dT = ops.col2im(dcols, ctx.in_shape, k, ctx.stride)
        return {"T": dT, "weights": dw, "gate_scale": 0.0, "gate_bias": 0.0}

    theta, mask = ctx.theta, ctx.mask
    gA = g2 * (1.0 - theta)
    gB = g2 * theta
    wm = p.weights.reshape(co, ci, k3) * mask
    center = ctx.cols[:, :, ctx.center_index].reshape(n, ci, -1)

    dw = ops._batch_outer(gA, c2).reshape(co, ci, k3)
    dw += ops._batch_outer(gB, c2).reshape(co, ci, k3) * mask
    dw -= ops._batch_outer(gB, center)[:, :, None] * mask
    dcols = (np.matmul(w2.T, gA) + np.matmul(wm.reshape(co, -1).T, gB)).reshape(ctx.cols.shape)
    dcenter = -np.matmul(wm.sum(axis=2).T, gB)
    dcols[:, :, ctx.center_index] += dcenter.reshape(dcols[:, :, ctx.center_index].shape)
    dT = ops.col2im(dcols, ctx.in_shape, k, ctx.stride)

    if p.mode == "adaptive":
        dtheta = (g2 * (ctx.B - ctx.A)).sum(axis=1, keepdims=True)
        dtheta_in = np.zeros(ctx.theta_in_shape)
        sz, sy, sx = ctx.stride
        dtheta_in[:, :, ::sz, ::sy, ::sx] = dtheta.reshape(n, 1, *ctx.out_shape[2:])
        dG, d_scale, d_bias = adaptive_theta_backward(dtheta_in, ctx.theta_ctx)
        if not ctx.detach_theta:
            dT = dT + texture_strength_backward(dG, ctx.texture_ctx)
    return {"T": dT, "weights": dw.reshape(p.weights.shape), "gate_scale": d_scale, "gate_bias": d_bias}


def _tape_fwd(x, w, gs, gb, *, fp, mode, theta, stride, pool_window, detach_theta):
    p = AbpdcParams(w, float(gs.reshape(-1)[0]), float(gb.reshape(-1)[0]), mode, theta)
    out, ctx = abpdc_forward(x, p, fp, stride, pool_window, detach_theta)
    return out, (ctx, gs.shape)


def _tape_bwd(g, c):
    ctx, gshape = c
    grads = abpdc_backward(g, ctx)
    return (grads["T"], grads["weights"], np.full(gshape, grads["gate_scale"]),
            np.full(gshape, grads["gate_bias"]))


def abpdc(x, w, gate_scale, gate_bias, fp: PyramidFootprint, mode: str = "adaptive",
          theta: float = 0.7, stride=1, pool_window: int = 3, detach_theta: bool = False) -> Var:
    """Tape version; ``gate_scale``/``gate_bias`` are shape-(1,) parameters."""
    return apply(_tape_fwd, _tape_bwd, [x, w, gate_scale, gate_bias], fp=fp, mode=mode,
                 theta=theta, stride=stride, pool_window=pool_window, detach_theta=detach_theta)
