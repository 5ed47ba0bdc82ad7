"""Single-head scaled dot-product cross-attention on voxel grids.

Queries come from the fixed (MRI) features, keys/values from the moving
(CT) features.  Besides the attended values each query also gets the
attention-weighted relative offset sum_j a_ij (p_j - p_i), a soft-argmax
displacement in voxel units.  Both are returned stacked along channels:
(n, dv + 3, z, y, x).
"""
from __future__ import annotations

import itertools

import numpy as np

from .errors import ShapeError
from .tape import Var, apply


def _softmax(logits, axis):
    m = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


def _check(q, k, v):
    if q.shape[2:] != k.shape[2:] or k.shape[2:] != v.shape[2:]:
        raise ShapeError(f"attention inputs must share a grid: {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query/key widths differ: {q.shape[1]} vs {k.shape[1]}")


def global_attention(q, k, v):
    """Every query attends to every key position; returns (out, ctx)."""
    _check(q, k, v)
    n, d = q.shape[:2]
    sp = q.shape[2:]
    Q, K, V = (a.reshape(n, a.shape[1], -1) for a in (q, k, v))
    pos = np.stack(np.meshgrid(*[np.arange(s, dtype=float) for s in sp], indexing="ij")).reshape(3, -1).T
    scale = 1.0 / np.sqrt(d)
    a = _softmax(np.einsum("ndi,ndj->nij", Q, K) * scale, axis=2)
    O = np.einsum("nij,ncj->nci", a, V)
    E = np.einsum("nij,jk->nki", a, pos) - pos.T[None]
    out = np.concatenate([O, E], axis=1).reshape(n, -1, *sp)
    return out, {"weights": a, "Q": Q, "K": K, "V": V, "pos": pos, "scale": scale,
                 "shapes": (q.shape, k.shape, v.shape)}


def global_attention_backward(g, ctx):
    a, Q, K, V, pos, scale = (ctx[key] for key in ("weights", "Q", "K", "V", "pos", "scale"))
    n, dv = V.shape[:2]
    g2 = g.reshape(n, g.shape[1], -1)
    dO, dE = g2[:, :dv], g2[:, dv:]
    dV = np.einsum("nci,nij->ncj", dO, a)
    da = np.einsum("nci,ncj->nij", dO, V) + np.einsum("nki,jk->nij", dE, pos)
    dl = a * (da - (a * da).sum(axis=2, keepdims=True)) * scale
    dQ = np.einsum("nij,ndj->ndi", dl, K)
    dK = np.einsum("nij,ndi->ndj", dl, Q)
    qs, ks, vs = ctx["shapes"]
    return dQ.reshape(qs), dK.reshape(ks), dV.reshape(vs)


def window_offsets(window: int) -> list[tuple[int, int, int]]:
    if window < 1 or window % 2 == 0:
        raise ShapeError(f"attention window must be odd and >= 1, got {window}")
    r = window // 2
    return list(itertools.product(range(-r, r + 1), repeat=3))


def _shift(xp, off, r, sp):
    dz, dy, dx = off
    return xp[:, :, r + dz:r + dz + sp[0], r + dy:r + dy + sp[1], r + dx:r + dx + sp[2]]


def window_attention(q, k, v, window: int = 3):
    """Each query attends to keys in the ``window``^3 neighbourhood that lie inside the grid."""
    _check(q, k, v)
    offsets = window_offsets(window)
    r = window // 2
    n, d = q.shape[:2]
    sp = q.shape[2:]
    pad = ((0, 0), (0, 0), (r, r), (r, r), (r, r))
    kp, vp = np.pad(k, pad), np.pad(v, pad)
    inside = np.pad(np.ones((1, 1, *sp), dtype=bool), pad)
    scale = 1.0 / np.sqrt(d)
    logits = np.empty((n, len(offsets), *sp))
    valid = np.empty((1, len(offsets), *sp), dtype=bool)
    for m, off in enumerate(offsets):
        logits[:, m] = (q * _shift(kp, off, r, sp)).sum(axis=1) * scale
        valid[:, m] = _shift(inside, off, r, sp)[:, 0]
    logits = np.where(valid, logits, -np.inf)
    a = _softmax(logits, axis=1)
    O = np.zeros(v.shape)
    E = np.zeros((n, 3, *sp))
    for m, off in enumerate(offsets):
        O += a[:, m:m + 1] * _shift(vp, off, r, sp)
        E += a[:, m:m + 1] * np.asarray(off, dtype=float).reshape(1, 3, 1, 1, 1)
    out = np.concatenate([O, E], axis=1)
    return out, {"weights": a, "q": q, "kp": kp, "vp": vp, "offsets": offsets, "r": r,
                 "scale": scale}


def window_attention_backward(g, ctx):
    a, q, kp, vp, offsets, r, scale = (ctx[key] for key in
                                       ("weights", "q", "kp", "vp", "offsets", "r", "scale"))
    sp = q.shape[2:]
    dv_ch = vp.shape[1]
    dO, dE = g[:, :dv_ch], g[:, dv_ch:]
    da = np.empty(a.shape)
    for m, off in enumerate(offsets):
        da[:, m] = (dO * _shift(vp, off, r, sp)).sum(axis=1) \
            + (dE * np.asarray(off, dtype=float).reshape(1, 3, 1, 1, 1)).sum(axis=1)
    dl = a * (da - (a * da).sum(axis=1, keepdims=True)) * scale
    dq = np.zeros(q.shape)
    dkp = np.zeros(kp.shape)
    dvp = np.zeros(vp.shape)
    for m, off in enumerate(offsets):
        w = dl[:, m:m + 1]
        dq += w * _shift(kp, off, r, sp)
        _shift(dkp, off, r, sp)[...] += w * q
        _shift(dvp, off, r, sp)[...] += a[:, m:m + 1] * dO
    crop = (slice(None), slice(None), slice(r, r + sp[0]), slice(r, r + sp[1]), slice(r, r + sp[2]))
    return dq, dkp[crop], dvp[crop]


def global_attention_var(q, k, v) -> tuple[Var, dict]:
    box = {}

    def fwd(q, k, v):
        out, ctx = global_attention(q, k, v)
        box["weights"] = ctx["weights"]
        return out, ctx

    return apply(fwd, global_attention_backward, [q, k, v]), box


def window_attention_var(q, k, v, window: int = 3) -> tuple[Var, dict]:
    box = {}

    def fwd(q, k, v):
        out, ctx = window_attention(q, k, v, window)
        box["weights"] = ctx["weights"]
        return out, ctx

    return apply(fwd, window_attention_backward, [q, k, v]), box
