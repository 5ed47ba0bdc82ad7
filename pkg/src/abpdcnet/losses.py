"""Classification, similarity and smoothness losses with analytic gradients."""
from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .ops import box_sum
from .tape import Var, apply


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, y):
    """Batch-mean negative log softmax probability of the true class."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    y = np.atleast_1d(np.asarray(y))
    if y.shape[0] != logits.shape[0]:
        raise ShapeError(f"{logits.shape[0]} logit rows but {y.shape[0]} labels")
    if not np.issubdtype(y.dtype, np.integer) or np.any((y < 0) | (y >= logits.shape[1])):
        raise ValueError(f"labels must be class indices in [0, {logits.shape[1]}), got {y}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(y)), y]
    return float(nll.mean()), (softmax(logits), y)


def cross_entropy_backward(g, ctx):
    p, y = ctx
    d = p.copy()
    d[np.arange(len(y)), y] -= 1.0
    return d * (g / len(y))


def ncc_map(a: np.ndarray, b: np.ndarray, window: int = 9, eps: float = 1e-5):
    """Per-voxel local NCC over ``window``^3 neighbourhoods clipped to the grid.

    Window means use the count of in-grid voxels, so border windows are not
    biased by padding.  Returns (ncc, ctx).
    """
    if a.shape != b.shape:
        raise ShapeError(f"ncc: shapes differ {a.shape} vs {b.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    cnt = box_sum(np.ones((1, 1, *a.shape[2:])), window)
    Sa, Sb = box_sum(a, window), box_sum(b, window)
    Saa, Sbb, Sab = box_sum(a * a, window), box_sum(b * b, window), box_sum(a * b, window)
    cross = Sab - Sa * Sb / cnt
    u = Saa - Sa * Sa / cnt + eps
    w = Sbb - Sb * Sb / cnt + eps
    den = np.sqrt(np.maximum(u, eps) * np.maximum(w, eps))
    ncc = cross / den
    return ncc, (a, b, cnt, Sa, Sb, u, w, den, ncc, window)


def ncc_loss(a: np.ndarray, b: np.ndarray, window: int = 9, eps: float = 1e-5):
    """-(mean local NCC); lies in [-1, 1]."""
    ncc, ctx = ncc_map(a, b, window, eps)
    return float(-ncc.mean()), ctx


def ncc_loss_backward(g, ctx):
    """Returns (d_a, d_b)."""
    a, b, cnt, Sa, Sb, u, w, den, ncc, window = ctx
    dncc = -float(g) / ncc.size
    dcross = dncc / den
    du = -dncc * ncc / (2.0 * u)
    dw = -dncc * ncc / (2.0 * w)
    dSab = dcross
    dSa = -dcross * Sb / cnt - du * 2.0 * Sa / cnt
    dSb = -dcross * Sa / cnt - dw * 2.0 * Sb / cnt
    da = box_sum(dSa, window) + 2.0 * a * box_sum(du, window) + b * box_sum(dSab, window)
    db = box_sum(dSb, window) + 2.0 * b * box_sum(dw, window) + a * box_sum(dSab, window)
    return da, db


def smoothness_loss(psi: np.ndarray):
    """Mean over axes of E[|d psi / d axis|^2] using forward differences.

    Each axis term averages the squared norm (summed over the 3 channels) of
    the forward difference over the n * (size - 1) positions that have one.
    """
    if psi.ndim != 5 or psi.shape[1] != 3:
        raise ShapeError(f"smoothness_loss expects (n, 3, z, y, x), got {psi.shape}")
    terms = []
    diffs = []
    for ax in (2, 3, 4):
        d = np.diff(psi, axis=ax)
        count = d.size // 3
        terms.append(float((d * d).sum() / count) if count else 0.0)
        diffs.append((d, count))
    return float(np.mean(terms)), (psi.shape, diffs)


def smoothness_loss_backward(g, ctx):
    shape, diffs = ctx
    out = np.zeros(shape)
    for ax, (d, count) in zip((2, 3, 4), diffs):
        if not count:
            continue
        dd = d * (2.0 * float(g) / (3.0 * count))
        hi = [slice(None)] * 5
        lo = [slice(None)] * 5
        hi[ax] = slice(1, None)
        lo[ax] = slice(None, -1)
        out[tuple(hi)] += dd
        out[tuple(lo)] -= dd
    return out


# ------------------------------------------------------------ tape wrappers


def _ce_fwd(logits, y):
    loss, ctx = cross_entropy(logits, y)
    return np.asarray(loss), ctx


def _ce_bwd(g, ctx):
    return cross_entropy_backward(g, ctx), None


def cross_entropy_var(logits, y) -> Var:
    return apply(_ce_fwd, _ce_bwd, [logits, np.asarray(y)])


def _ncc_fwd(a, b, window, eps):
    loss, ctx = ncc_loss(a, b, window, eps)
    return np.asarray(loss), ctx


def ncc_loss_var(a, b, window: int = 9, eps: float = 1e-5) -> Var:
    return apply(_ncc_fwd, ncc_loss_backward, [a, b], window=window, eps=eps)


def _sm_fwd(psi):
    loss, ctx = smoothness_loss(psi)
    return np.asarray(loss), ctx


def _sm_bwd(g, ctx):
    return (smoothness_loss_backward(g, ctx),)


def smoothness_loss_var(psi) -> Var:
    return apply(_sm_fwd, _sm_bwd, [psi])
