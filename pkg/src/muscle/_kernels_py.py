"""Pure-numpy versions of the hot kernels.

These are the reference semantics for ``_ckernels``; the two must agree to
floating-point round-off.
"""

import numpy as np


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` [B,C,H,W] into patch columns [B, C*kh*kw, OH*OW]."""
    B, C, H, W = x.shape
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((B, C, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(B, C * kh * kw, oh * ow)


def col2im(cols, C, H, W, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back onto [B,C,H,W]."""
    B = cols.shape[0]
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    cols = cols.reshape(B, C, kh, kw, oh, ow)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)


def _lse(z, axis):
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(z - m).sum(axis=axis)) + np.squeeze(m, axis)


def sinkhorn_log(cost, log_a, log_b, eps, max_iter, tol, f0=None, g0=None):
    """Batched log-domain Sinkhorn.

    ``cost`` is [N,A,B]; ``log_a`` [N,A] and ``log_b`` [N,B] are log marginals
    (``-inf`` allowed for empty bins); ``f0``/``g0`` warm-start the potentials
    (only ``g0`` matters, ``f`` is recomputed first). Returns dual potentials ``f``, ``g``,
    the iteration count and the final L1 row-marginal violation per problem.
    When a problem does not reach ``tol`` the potentials with the smallest
    violation seen are returned.
    """
    N, A, B = cost.shape
    f = np.zeros((N, A)) if f0 is None else np.array(f0, dtype=np.float64)
    g = np.zeros((N, B)) if g0 is None else np.array(g0, dtype=np.float64)
    best_f = f.copy()
    best_g = g.copy()
    best_err = np.full(N, np.inf)
    iters = np.zeros(N, dtype=np.int64)
    active = np.ones(N, dtype=bool)
    a = np.exp(log_a)
    with np.errstate(invalid="ignore"):
        for it in range(max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            C = cost[idx]
            fa = eps * log_a[idx] - eps * _lse((g[idx][:, None, :] - C) / eps, 2)
            ga = eps * log_b[idx] - eps * _lse((fa[:, :, None] - C) / eps, 1)
            f[idx] = fa
            g[idx] = ga
            P = np.exp((fa[:, :, None] + ga[:, None, :] - C) / eps)
            err = np.abs(P.sum(axis=2) - a[idx]).sum(axis=1)
            iters[idx] = it + 1
            better = err < best_err[idx]
            upd = idx[better]
            best_err[upd] = err[better]
            best_f[upd] = fa[better]
            best_g[upd] = ga[better]
            active[idx[err <= tol]] = False
    return best_f, best_g, iters, best_err
