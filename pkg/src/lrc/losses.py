"""Distillation loss terms and their analytic gradients.

Logit arrays may carry any number of leading axes; the last axis is the
vocabulary. "Positions" means the product of the leading axes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidInputError

DEFAULT_TAU = 2.0
DEFAULT_LAMBDA = 1.0


@dataclass
class LossBreakdown:
    kd: float
    lm: float
    clone: float
    total: float
    lam: float
    tau: float
    # raw activation-matching sum = clone * clone_norm
    clone_norm: float = 1.0
    kd_weight: float = 1.0
    lm_weight: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def kd_loss(teacher_logits, student_logits, tau: float = DEFAULT_TAU):
    """Forward KL ``D(p_t || p_s)`` on temperature-softened outputs.

    Averaged over positions and scaled by ``tau**2`` so the gradient magnitude
    does not shrink with temperature. Returns ``(loss, d loss / d student_logits)``.
    """
    zt = np.asarray(teacher_logits, dtype=np.float64)
    zs = np.asarray(student_logits, dtype=np.float64)
    if zt.shape != zs.shape:
        raise InvalidInputError(f"logit shapes differ: {zt.shape} vs {zs.shape}")
    if not tau > 0:
        raise InvalidInputError("temperature must be positive")
    npos = zs.size // zs.shape[-1]
    lpt = log_softmax(zt / tau)
    lps = log_softmax(zs / tau)
    pt = np.exp(lpt)
    kl = np.sum(pt * (lpt - lps))
    loss = tau * tau * kl / npos
    grad = tau * (np.exp(lps) - pt) / npos
    return float(loss), grad


def lm_loss(student_logits, targets):
    """Mean next-token cross-entropy (nats) and its gradient."""
    zs = np.asarray(student_logits, dtype=np.float64)
    targets = np.asarray(targets)
    vocab = zs.shape[-1]
    if targets.shape != zs.shape[:-1]:
        raise InvalidInputError(f"targets {targets.shape} do not match logits {zs.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise InvalidInputError("target id out of range")
    npos = targets.size
    lp = log_softmax(zs).reshape(npos, vocab)
    flat = targets.reshape(npos)
    idx = np.arange(npos)
    loss = -lp[idx, flat].sum() / npos
    grad = np.exp(lp)
    grad[idx, flat] -= 1.0
    grad /= npos
    return float(loss), grad.reshape(zs.shape)


def clone_loss(hidden_t, attn_t, hidden_s, attn_s, up_h, up_a):
    """Normalized activation-matching loss.

    ``sum_l ||h_t - h_s U_h^T||^2 + ||a_t - a_s U_a^T||^2`` divided by
    ``L * positions * d``. Arguments are per-layer lists; teacher activations are
    ``(..., d)``, student ones ``(..., r)`` and up-projectors ``d x r``.

    Returns ``(loss, norm, grads)`` with ``norm`` the normalizer (multiply to get
    the raw sum) and ``grads`` a dict holding lists ``hidden``, ``attn``, ``up_h``
    and ``up_a``.
    """
    nl = len(hidden_t)
    if not (len(attn_t) == len(hidden_s) == len(attn_s) == len(up_h) == len(up_a) == nl):
        raise InvalidInputError("activation traces have mismatched layer counts")
    if nl == 0:
        raise InvalidInputError("empty activation trace")
    d = hidden_t[0].shape[-1]
    npos = hidden_t[0].size // d
    norm = float(nl * npos * d)
    total = 0.0
    grads = {"hidden": [], "attn": [], "up_h": [], "up_a": []}
    for pairs, gname, uname in (((hidden_t, hidden_s, up_h), "hidden", "up_h"),
                                ((attn_t, attn_s, up_a), "attn", "up_a")):
        for xt, xs, u in zip(*pairs):
            if xt.shape[:-1] != xs.shape[:-1] or u.shape != (xt.shape[-1], xs.shape[-1]):
                raise InvalidInputError("activation / up-projector shape mismatch")
            resid = xt - xs @ u.T
            total += float(np.sum(resid * resid))
            g = (-2.0 / norm) * resid
            grads[gname].append(g @ u)
            grads[uname].append(g.reshape(-1, d).T @ xs.reshape(-1, xs.shape[-1]))
    return total / norm, norm, grads


def total_loss(kd: float, lm: float, clone: float, lam: float = DEFAULT_LAMBDA,
               tau: float = DEFAULT_TAU, clone_norm: float = 1.0,
               kd_weight: float = 1.0, lm_weight: float = 1.0) -> LossBreakdown:
    """``kd + lm + lam * clone``; the term weights are 0/1 switches for ablations."""
    total = kd_weight * kd + lm_weight * lm + lam * clone
    return LossBreakdown(kd=kd, lm=lm, clone=clone, total=total, lam=lam, tau=tau,
                         clone_norm=clone_norm, kd_weight=kd_weight, lm_weight=lm_weight)
