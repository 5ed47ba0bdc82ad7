"""Shared oracles for the test suite."""
from __future__ import annotations

import numpy as np

from abpdcnet import tape
from abpdcnet.volume import ParamStore, finite_diff_gradient, relative_error


def naive_conv3d(x: np.ndarray, w: np.ndarray, stride=(1, 1, 1)) -> np.ndarray:
    """Cross-correlation by explicit loops, zero padding K // 2."""
    n, ci, D, H, W = x.shape
    co, _, k = w.shape[:3]
    p = k // 2
    sz, sy, sx = stride
    Do, Ho, Wo = ((D + 2 * p - k) // sz + 1, (H + 2 * p - k) // sy + 1, (W + 2 * p - k) // sx + 1)
    out = np.zeros((n, co, Do, Ho, Wo))
    for b in range(n):
        for o in range(co):
            for z in range(Do):
                for y in range(Ho):
                    for xx in range(Wo):
                        acc = 0.0
                        for c in range(ci):
                            for dz in range(k):
                                for dy in range(k):
                                    for dx in range(k):
                                        zi, yi, xi = z * sz + dz - p, y * sy + dy - p, xx * sx + dx - p
                                        if 0 <= zi < D and 0 <= yi < H and 0 <= xi < W:
                                            acc += w[o, c, dz, dy, dx] * x[b, c, zi, yi, xi]
                        out[b, o, z, y, xx] = acc
    return out


def tape_grad_error(build, arrays: dict, seed: int, eps: float = 1e-5, probes: int = 12,
                    skip_kinks: bool = False) -> tuple[float, int, int]:
    """Relative error between the tape gradient and central differences.

    ``build`` maps a dict of inputs (tape leaves or plain arrays) to a Var.
    The output is contracted with a random cotangent; up to ``probes``
    random entries of every input are probed.  Returns
    (relative error over all probed entries, probes used, probes skipped).
    """
    rng = np.random.default_rng(seed)
    ps = ParamStore()
    for k, v in arrays.items():
        ps.add(k, v)
    leaves = {k: tape.leaf(ps[k]) for k in ps}
    out = build(leaves)
    cot = rng.normal(size=np.shape(out.value))
    tape.backward(out, grad=cot)

    def f(p):
        return float(np.sum(cot * build({k: p[k] for k in p}).value))

    analytic, numeric = [], []
    for k in ps:
        size = ps[k].size
        idx = rng.choice(size, size=min(probes, size), replace=False)
        num = finite_diff_gradient(f, ps, k, eps=eps, indices=idx, skip_kinks=skip_kinks)
        g = leaves[k].grad if leaves[k].grad is not None else np.zeros(ps[k].shape)
        analytic.append(np.asarray(g).reshape(-1)[idx])
        numeric.append(num.reshape(-1)[idx])
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    skipped = int(np.sum(~np.isfinite(n)))
    return relative_error(a, n), a.size - skipped, skipped


def model_grad_error(model, x_ct, x_mri, y, weights, probes: int = 3, eps: float = 1e-5,
                     seed: int = 0) -> tuple[float, int, int]:
    """Joint-loss gradient of ``model`` against central differences on every parameter."""
    rng = np.random.default_rng(seed)
    model.params.zero_grads()
    model.loss_and_grad(x_ct, x_mri, y, weights)
    analytic, numeric = [], []

    def f(p):
        return model.loss_value(x_ct, x_mri, y, weights, params=p)

    for name in model.params:
        size = model.params[name].size
        idx = rng.choice(size, size=min(probes, size), replace=False)
        num = finite_diff_gradient(f, model.params, name, eps=eps, indices=idx, skip_kinks=True)
        analytic.append(model.params.grad(name).reshape(-1)[idx])
        numeric.append(num.reshape(-1)[idx])
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    skipped = int(np.sum(~np.isfinite(n)))
    return relative_error(a, n), a.size - skipped, skipped
