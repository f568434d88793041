"""Rank-r truncation and the factored weight ``W_s = P_left @ W_t @ P_right``."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .matcore import RngState, SvdFactors, as_matrix, random_orthonormal, svd

INIT_MODES = ("svd", "random", "identity")


@dataclass
class LowRankFactors:
    """Projection pair for one teacher matrix of shape ``teacher_shape = (m, n)``.

    ``p_left`` is ``r x m`` and ``p_right`` is ``n x r_right``; ``r_right``
    equals ``r`` except for the feed-forward maps, whose wide side keeps the
    teacher's expansion factor.
    """

    p_left: np.ndarray
    p_right: np.ndarray
    teacher_shape: tuple

    @property
    def rank(self) -> int:
        return self.p_left.shape[0]

    @property
    def rank_right(self) -> int:
        return self.p_right.shape[1]

    @property
    def student_shape(self) -> tuple:
        return (self.p_left.shape[0], self.p_right.shape[1])

    def num_params(self) -> int:
        return self.p_left.size + self.p_right.size


@dataclass
class ApproxReport:
    errors: list
    ranks: list
    total: float = field(init=False)

    def __post_init__(self):
        self.total = float(sum(self.errors))

    def to_dict(self) -> dict:
        return {"errors": [float(e) for e in self.errors], "ranks": list(self.ranks), "total": self.total}


def truncate_rank(f: SvdFactors, r: int):
    """Best rank-``r`` approximation and its Frobenius error (Eckart-Young)."""
    k = len(f.S)
    if not 1 <= r <= k:
        raise InvalidInputError(f"rank {r} outside [1, {k}]")
    w_r = (f.U[:, :r] * f.S[:r]) @ f.V[:, :r].T
    tail = f.S[r:]
    return w_r, float(np.sqrt(np.sum(tail * tail)))


def _extend_basis(q: np.ndarray, k: int, rng: RngState | None) -> np.ndarray:
    # q has orthonormal columns; return k orthonormal columns starting with q's
    n, have = q.shape
    if k <= have:
        return q[:, :k].copy()
    if rng is None:
        extra = np.eye(n)
    else:
        extra = rng.normal((n, n))
    out = np.concatenate([q, np.zeros((n, k - have))], axis=1)
    col = have
    for j in range(extra.shape[1]):
        if col == k:
            break
        e = extra[:, j].copy()
        for _ in range(2):
            e -= out[:, :col] @ (out[:, :col].T @ e)
        nrm = np.linalg.norm(e)
        if nrm > 1e-8:
            out[:, col] = e / nrm
            col += 1
    return out


def init_projections(w_t, r: int, mode: str = "svd", rng: RngState | None = None,
                     r_right: int | None = None) -> LowRankFactors:
    """Initial projections for teacher matrix ``w_t`` (m x n).

    ``svd`` sets ``p_left = U_r^T`` and ``p_right = V_r`` so the composed weight
    is ``diag(S_1..S_r)``. ``random`` draws both factors with orthonormal rows /
    columns. ``identity`` selects the leading coordinates, which reproduces
    ``w_t`` exactly when the ranks equal its dimensions.
    """
    w_t = as_matrix(w_t, "W_t")
    m, n = w_t.shape
    r_right = r if r_right is None else r_right
    if r < 1 or r_right < 1:
        raise InvalidInputError("ranks must be >= 1")
    if r > m or r_right > n:
        raise InvalidInputError(f"ranks ({r}, {r_right}) exceed teacher shape {w_t.shape}")
    if mode == "svd":
        f = svd(w_t)
        p_left = _extend_basis(f.U, r, None).T
        p_right = _extend_basis(f.V, r_right, None)
    elif mode == "random":
        if rng is None:
            raise InvalidInputError("random mode needs an RngState")
        p_left = random_orthonormal(rng, m, r).T
        p_right = random_orthonormal(rng, n, r_right)
    elif mode == "identity":
        p_left = np.eye(r, m)
        p_right = np.eye(n, r_right)
    else:
        raise InvalidInputError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")
    return LowRankFactors(np.ascontiguousarray(p_left), np.ascontiguousarray(p_right), (m, n))


def compose_student_weight(f: LowRankFactors, w_t) -> np.ndarray:
    w_t = np.asarray(w_t, dtype=np.float64)
    if w_t.shape != tuple(f.teacher_shape):
        raise InvalidInputError(f"teacher weight {w_t.shape} does not match factors {f.teacher_shape}")
    if f.p_left.shape[1] != w_t.shape[0] or f.p_right.shape[0] != w_t.shape[1]:
        raise InvalidInputError("projection shapes do not conform to the teacher weight")
    return f.p_left @ w_t @ f.p_right


def projection_gradients(grad_ws, w_t, f: LowRankFactors):
    """Chain rule through ``W_s = P_left W_t P_right``.

    Returns ``(dL/dP_left, dL/dP_right)`` as
    ``G (W_t P_right)^T`` and ``(P_left W_t)^T G`` for upstream ``G = dL/dW_s``.
    """
    grad_ws = np.asarray(grad_ws, dtype=np.float64)
    w_t = np.asarray(w_t, dtype=np.float64)
    if grad_ws.shape != f.student_shape:
        raise InvalidInputError(f"upstream gradient {grad_ws.shape} != student shape {f.student_shape}")
    if w_t.shape != tuple(f.teacher_shape):
        raise InvalidInputError("teacher weight shape mismatch")
    g_left = grad_ws @ (w_t @ f.p_right).T
    g_right = (f.p_left @ w_t).T @ grad_ws
    return g_left, g_right


def approximation_error_profile(teacher_weights, ranks) -> ApproxReport:
    """Per-layer Eckart-Young errors ``eps_l`` and their sum."""
    weights = [as_matrix(w, "teacher weight") for w in teacher_weights]
    if np.isscalar(ranks):
        ranks = [int(ranks)] * len(weights)
    ranks = [int(r) for r in ranks]
    if len(ranks) == 1 and len(weights) > 1:
        ranks = ranks * len(weights)
    if len(ranks) != len(weights):
        raise InvalidInputError("need one rank per layer or a single shared rank")
    errors = []
    for w, r in zip(weights, ranks):
        if r > min(w.shape):
            raise InvalidInputError(f"rank {r} exceeds min dimension of a {w.shape} layer")
        _, err = truncate_rank(svd(w), r)
        errors.append(err)
    return ApproxReport(errors=errors, ranks=ranks)
