"""Dense float64 linear algebra and seeded randomness.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD is a one-sided Jacobi
iteration (see :mod:`lrc.kernels`) with a deterministic sign convention so that
factorizations, and everything initialized from them, are reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidInputError, NumericalError

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 100


def as_matrix(a, name="matrix") -> np.ndarray:
    """Validate and return ``a`` as a finite, non-empty 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``A = U diag(S) V^T`` with ``k = min(m, n)`` columns."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _complete_columns(q: np.ndarray, missing: np.ndarray) -> np.ndarray:
    # fill the flagged columns with an orthonormal complement built from e_1, e_2, ...
    q = q.copy()
    m = q.shape[0]
    keep = [j for j in range(q.shape[1]) if not missing[j]]
    basis = [q[:, j] for j in keep]
    cand = 0
    for j in np.flatnonzero(missing):
        while True:
            if cand >= m:
                raise NumericalError("could not complete orthonormal basis")
            e = np.zeros(m)
            e[cand] = 1.0
            cand += 1
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 0.5:
                e /= nrm
                break
        q[:, j] = e
        basis.append(e)
    return q


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-10)
        if nz.size and col[nz[0]] < 0:
            u[:, j] *= -1.0
            v[:, j] *= -1.0


def svd(a, tol: float = SVD_TOL, max_sweeps: int = SVD_MAX_SWEEPS) -> SvdFactors:
    """Thin singular value decomposition by one-sided Jacobi rotations.

    Singular values come back in descending order. Each column of ``U`` has a
    non-negative first nonzero entry and ``V`` is flipped to match.

    Raises
    ------
    NumericalError
        If the rotations have not converged after ``max_sweeps`` sweeps; the
        error's ``residual`` is the remaining relative column coupling.
    """
    a = as_matrix(a, "A")
    transposed = a.shape[0] < a.shape[1]
    work = np.array(a.T if transposed else a, dtype=np.float64, order="C")
    m, n = work.shape
    v, sweeps, off = kernels.jacobi_sweeps(work, tol, max_sweeps)
    if off > tol:
        raise NumericalError(f"Jacobi SVD did not converge in {sweeps} sweeps", residual=off)
    s = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    work = work[:, order]
    v = v[:, order]
    smax = s[0] if s.size else 0.0
    tiny = s <= max(smax * 1e-14 * max(m, n), np.finfo(float).tiny)
    u = np.zeros((m, n))
    safe = ~tiny
    u[:, safe] = work[:, safe] / s[safe]
    if tiny.any():
        u = _complete_columns(u, tiny)
    if transposed:
        u, v = v, u
    u = np.ascontiguousarray(u)
    v = np.ascontiguousarray(v)
    _fix_signs(u, v)
    return SvdFactors(U=u, S=s, V=v)


def frobenius_norm(a) -> float:
    a = as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


def spectral_norm(a) -> float:
    return float(svd(a).S[0])


class RngState:
    """Seeded random stream.

    Every draw builds a PCG64 generator from ``(seed, counter)`` and then bumps
    the counter, so a given ``(seed, counter)`` pair always yields the same
    numbers regardless of what was drawn before.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter) & 0xFFFFFFFFFFFFFFFF

    def __repr__(self):
        return f"RngState(seed={self.seed}, counter={self.counter})"

    def generator(self) -> np.random.Generator:
        g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.counter])))
        self.counter = (self.counter + 1) & 0xFFFFFFFFFFFFFFFF
        return g

    def spawn(self, tag: int) -> "RngState":
        """Independent child stream; does not advance this one."""
        child = np.random.SeedSequence([self.seed, self.counter, int(tag)])
        return RngState(int(child.generate_state(1, np.uint64)[0]))

    def normal(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self.generator().random(shape)

    def integers(self, low, high, shape) -> np.ndarray:
        return self.generator().integers(low, high, size=shape)


def random_gaussian(rng: RngState, rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise InvalidInputError("rows and cols must be >= 1")
    return rng.normal((rows, cols))


def random_orthonormal(rng: RngState, rows: int, cols: int) -> np.ndarray:
    """``rows x cols`` matrix with orthonormal columns (Haar-distributed)."""
    if rows < 1 or cols < 1:
        raise InvalidInputError("rows and cols must be >= 1")
    if cols > rows:
        raise InvalidInputError(f"need cols <= rows for orthonormal columns, got {rows}x{cols}")
    q, r = np.linalg.qr(rng.normal((rows, cols)))
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs
