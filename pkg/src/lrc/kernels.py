"""Inner loops: one-sided Jacobi rotations and Markov-chain sampling.

Each kernel has a numba version (``*_jit``) and a numpy version (``*_np``);
the public name points at whichever :mod:`lrc._accel` selects.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = ["jacobi_sweeps", "markov_sample", "gelu_fwd", "gelu_bwd"]

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def jacobi_sweeps_np(a, tol, max_sweeps):
    """Hestenes one-sided Jacobi on the columns of ``a`` (m x n, m >= n).

    Rotates ``a`` in place until every column pair is orthogonal to relative
    precision ``tol``. Returns ``(v, sweeps, off)`` where ``a_in @ v == a_out``
    and ``off`` is the largest relative column coupling seen in the last sweep.
    """
    n = a.shape[1]
    v = np.eye(n)
    off = 0.0
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = a[:, p]
                aq = a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if alpha == 0.0 or beta == 0.0:
                    continue
                rel = abs(gamma) / np.sqrt(alpha * beta)
                if rel > off:
                    off = rel
                if rel <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                new_q = s * ap + c * aq
                a[:, p] = new_p
                a[:, q] = new_q
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if off <= tol:
            break
    return v, sweeps, off


@njit
def jacobi_sweeps_jit(a, tol, max_sweeps):
    m, n = a.shape
    v = np.eye(n)
    off = 0.0
    sweeps = 0
    for sw in range(1, max_sweeps + 1):
        sweeps = sw
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += a[i, p] * a[i, p]
                    beta += a[i, q] * a[i, q]
                    gamma += a[i, p] * a[i, q]
                if alpha == 0.0 or beta == 0.0:
                    continue
                rel = abs(gamma) / np.sqrt(alpha * beta)
                if rel > off:
                    off = rel
                if rel <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    xp = a[i, p]
                    xq = a[i, q]
                    a[i, p] = c * xp - s * xq
                    a[i, q] = s * xp + c * xq
                for i in range(n):
                    xp = v[i, p]
                    xq = v[i, q]
                    v[i, p] = c * xp - s * xq
                    v[i, q] = s * xp + c * xq
        if off <= tol:
            break
    return v, sweeps, off


def markov_sample_np(cum, uniforms, start, order, vocab):
    """Draw a token path from cumulative transition rows ``cum``.

    ``cum`` has one row per context (``vocab**order`` rows); ``start`` holds the
    first ``order`` tokens. Token ``i`` is the first index whose cumulative
    probability exceeds ``uniforms[i]``.
    """
    n = uniforms.shape[0]
    out = np.empty(n, dtype=np.int64)
    out[:order] = start
    for i in range(order, n):
        if order == 1:
            ctx = out[i - 1]
        else:
            ctx = out[i - 2] * vocab + out[i - 1]
        tok = int(np.searchsorted(cum[ctx], uniforms[i], side="right"))
        out[i] = min(tok, vocab - 1)
    return out


@njit
def markov_sample_jit(cum, uniforms, start, order, vocab):
    n = uniforms.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(order):
        out[i] = start[i]
    for i in range(order, n):
        if order == 1:
            ctx = out[i - 1]
        else:
            ctx = out[i - 2] * vocab + out[i - 1]
        u = uniforms[i]
        lo = 0
        hi = vocab
        # first j with cum[ctx, j] > u
        while lo < hi:
            mid = (lo + hi) // 2
            if cum[ctx, mid] > u:
                hi = mid
            else:
                lo = mid + 1
        out[i] = lo if lo < vocab else vocab - 1
    return out


def gelu_fwd_np(u):
    """Tanh-approximate GELU; also returns the tanh term for the backward pass."""
    t = np.tanh(_GELU_C * (u + _GELU_A * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def gelu_bwd_np(g, u, t):
    dt = _GELU_C * (1.0 + 3.0 * _GELU_A * (u * u))
    return g * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


@njit
def _gelu_fwd_flat(u, out, t):
    for i in range(u.size):
        x = u[i]
        z = _GELU_C * (x + _GELU_A * (x * x * x))
        # tanh through exp: numba's scalar tanh is several times slower
        e = np.exp(-2.0 * abs(z))
        th = (1.0 - e) / (1.0 + e)
        if z < 0.0:
            th = -th
        t[i] = th
        out[i] = 0.5 * x * (1.0 + th)


@njit
def _gelu_bwd_flat(g, u, t, out):
    for i in range(u.size):
        x = u[i]
        th = t[i]
        dt = _GELU_C * (1.0 + 3.0 * _GELU_A * (x * x))
        out[i] = g[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dt)


def gelu_fwd_jit(u):
    u = np.ascontiguousarray(u)
    out = np.empty_like(u)
    t = np.empty_like(u)
    _gelu_fwd_flat(u.reshape(-1), out.reshape(-1), t.reshape(-1))
    return out, t


def gelu_bwd_jit(g, u, t):
    g = np.ascontiguousarray(g)
    out = np.empty_like(u)
    _gelu_bwd_flat(g.reshape(-1), np.ascontiguousarray(u).reshape(-1),
                   np.ascontiguousarray(t).reshape(-1), out.reshape(-1))
    return out


# numpy's vectorized tanh beats the scalar jit loop for the forward GELU (see
# benchmarks/bench_kernels.py), so both paths use the numpy forward.
gelu_fwd = gelu_fwd_np

if USE_NUMBA:
    jacobi_sweeps = jacobi_sweeps_jit
    markov_sample = markov_sample_jit
    gelu_bwd = gelu_bwd_jit
else:
    jacobi_sweeps = jacobi_sweeps_np
    markov_sample = markov_sample_np
    gelu_bwd = gelu_bwd_np
