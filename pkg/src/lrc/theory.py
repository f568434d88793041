"""Numerical evaluation of the bounds and their verification against measurements.

Every hidden O(.) constant is an explicit argument here; calibration helpers
fit them on one set of runs so they can be frozen and checked on another.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma
from scipy.stats import spearmanr

from .errors import InsufficientDataError, InvalidInputError
from .lowrank import truncate_rank
from .matcore import RngState, frobenius_norm, svd
from .model import LAYER_MAPS, StudentModel, TeacherModel, distill_objective, teacher_forward

MIN_TRACE_STEPS = 100


def spearman(x, y) -> float:
    """Spearman rank correlation.

    The statistic is a ratio of small integers; scipy's floating-point path can
    land one ulp off (0.7999999999999999 for an exact 0.8), so round to 12
    decimals before it is compared against a threshold.
    """
    return round(float(spearmanr(x, y).statistic), 12)


def _clean(x):
    """JSON-safe copy: numpy scalars/arrays to python, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class BoundReport:
    name: str
    measured: list
    bound: list
    constants: dict = field(default_factory=dict)
    tolerance: float = 0.0
    # fraction of points that must satisfy measured <= bound + tolerance
    required_fraction: float = 1.0
    notes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def margins(self) -> np.ndarray:
        return np.asarray(self.bound, dtype=float) - np.asarray(self.measured, dtype=float)

    @property
    def margin(self) -> float:
        m = self.margins
        return float(m.min()) if m.size else float("nan")

    @property
    def fraction_satisfied(self) -> float:
        m = self.margins
        return float(np.mean(m >= -self.tolerance)) if m.size else 0.0

    @property
    def passed(self) -> bool:
        # a side condition (monotonicity, trend) that failed sets the fraction to inf
        if not len(self.measured) or self.required_fraction > 1.0:
            return False
        if self.required_fraction == 1.0:
            return bool(self.margin >= -self.tolerance)
        return self.fraction_satisfied >= self.required_fraction

    def to_dict(self) -> dict:
        return _clean({
            "name": self.name,
            "constants": self.constants,
            "points": [{"measured": m, "bound": b} for m, b in zip(self.measured, self.bound)],
            "margin": self.margin,
            "tolerance": self.tolerance,
            "required_fraction": self.required_fraction,
            "fraction_satisfied": self.fraction_satisfied,
            "pass": self.passed,
            "notes": list(self.notes),
            "extra": self.extra,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- gradient deviation under truncation

def truncate_teacher_maps(teacher: TeacherModel, r: int, rel_tol: float = 1e-12):
    """Teacher params with every per-layer linear map replaced by its rank-r truncation.

    Returns ``(params, eps)`` with ``eps`` the summed Frobenius errors. A map whose
    singular-value tail is numerically zero (below ``rel_tol`` relative to its
    norm) is kept unchanged, so exactly-low-rank maps give ``eps == 0`` exactly.
    """
    if r < 1:
        raise InvalidInputError("truncation rank must be >= 1")
    params = dict(teacher.params)
    eps = 0.0
    for l in range(teacher.config.num_layers):
        for name in LAYER_MAPS:
            key = f"{l}.{name}"
            w = teacher.params[key]
            if r >= min(w.shape):
                continue
            f = svd(w)
            w_r, err = truncate_rank(f, r)
            if err <= rel_tol * max(frobenius_norm(w), 1e-300):
                continue
            params[key] = w_r
            eps += err
    return params, eps


def _map_factor_grads(grads: dict) -> np.ndarray:
    keys = sorted(k for k in grads if k.endswith(".L") or k.endswith(".R"))
    return np.concatenate([grads[k].ravel() for k in keys])


def lemma1_deviation(teacher: TeacherModel, student: StudentModel, batch, r: int,
                     lam: float = 1.0, tau: float = 2.0):
    """``(eps, deviation)`` for truncation rank ``r``.

    deviation = norm over all projection factors of the gradient computed with
    the student composed from W_t minus the gradient with W_t replaced by its
    rank-r truncation; targets always come from the untouched teacher.
    """
    tt = teacher_forward(teacher, batch.inputs)
    _, g_full, _ = distill_objective(student, teacher, batch, lam, tau, teacher_trace=tt)
    trunc, eps = truncate_teacher_maps(teacher, r)
    _, g_tr, _ = distill_objective(student, teacher, batch, lam, tau, teacher_trace=tt,
                                   teacher_params=trunc)
    dev = float(np.linalg.norm(_map_factor_grads(g_full) - _map_factor_grads(g_tr)))
    return eps, dev


def lemma1_sweep(teacher, student, batch, ranks, lam=1.0, tau=2.0):
    """List of ``(r, eps, deviation)`` over truncation ranks."""
    return [(int(r), *lemma1_deviation(teacher, student, batch, r, lam, tau)) for r in ranks]


def calibrate_lemma1_constant(sweeps) -> float:
    """Ĉ = max deviation/eps over calibration sweeps (points with eps > 0)."""
    ratios = [dev / eps for sweep in sweeps for _, eps, dev in sweep if eps > 0]
    if not ratios:
        raise InsufficientDataError("no calibration point with eps > 0")
    return float(max(ratios))


def lemma1_report(sweeps, c_hat: float, spearman_min: float = 0.95) -> BoundReport:
    """Check held-out sweeps against ``deviation <= c_hat * eps`` and per-sweep monotonicity."""
    measured, bound, rhos = [], [], []
    zero_ok = True
    for sweep in sweeps:
        eps = np.array([p[1] for p in sweep])
        dev = np.array([p[2] for p in sweep])
        zero_ok &= bool(np.all(dev[eps == 0] == 0.0))
        measured.extend(dev.tolist())
        bound.extend((c_hat * eps).tolist())
        if len(sweep) >= 2 and np.ptp(eps) > 0:
            rhos.append(spearman(eps, dev))
    rep = BoundReport("lemma1", measured, bound, {"C_hat": c_hat}, tolerance=1e-12)
    rep.extra = {"spearman": rhos, "spearman_min": spearman_min, "zero_at_zero_eps": zero_ok,
                 "sweeps": [[list(p) for p in s] for s in sweeps]}
    if rhos and min(rhos) < spearman_min or not zero_ok:
        rep.notes.append("monotonicity or zero-deviation check failed")
        rep.required_fraction = float("inf")
    return rep


# ---------------------------------------------------------------- SGD convergence

def convergence_bound(L: float, delta0: float, sigma2: float, T, eps: float = 0.0,
                      c: float = 0.0):
    """``2 L delta0 / T + sigma2 / T + c eps^2 / sqrt(T)`` (scalar or array ``T``)."""
    for name, v in (("L", L), ("delta0", delta0), ("sigma2", sigma2), ("eps", eps), ("c", c)):
        if not v >= 0:
            raise InvalidInputError(f"{name} must be >= 0")
    T_arr = np.asarray(T, dtype=float)
    if np.any(T_arr < 1):
        raise InvalidInputError("T must be >= 1")
    out = 2.0 * L * delta0 / T_arr + sigma2 / T_arr + c * eps * eps / np.sqrt(T_arr)
    return float(out) if out.ndim == 0 else out


def loglog_slope(y, start: int = 1) -> float:
    """Least-squares slope of log y against log t for t = start..len(y)."""
    y = np.asarray(y, dtype=float)[start - 1:]
    t = np.arange(start, start + y.size, dtype=float)
    ok = y > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(t[ok]), np.log(y[ok]), 1)[0])


def fit_convergence_constant(trace, consts, skip: int = MIN_TRACE_STEPS) -> float:
    """Smallest c making the bound hold at every prefix T > skip of ``trace``."""
    run = trace.running_mean()
    if run.size <= skip:
        raise InsufficientDataError(f"trace has {run.size} steps, need more than {skip}")
    eps = consts.approx_error
    if eps <= 0:
        return 0.0
    T = np.arange(1, run.size + 1, dtype=float)
    base = convergence_bound(consts.smoothness, consts.initial_gap, consts.grad_variance, T)
    need = (run - base) * np.sqrt(T) / (eps * eps)
    return float(max(0.0, need[skip:].max()))


def verify_convergence(trace, consts, c: float = 0.0, skip: int = 0,
                       required_fraction: float = 1.0, rel_tol: float = 1e-12) -> BoundReport:
    """Running mean of ``||grad||^2`` against the bound at every prefix after ``skip``.

    ``consts`` provides smoothness L, initial gap delta0, gradient variance and
    approximation error. Also reports the log-log slope of the running mean.
    """
    run = trace.running_mean()
    if run.size < MIN_TRACE_STEPS:
        raise InsufficientDataError(f"trace has {run.size} steps; at least {MIN_TRACE_STEPS} required")
    T = np.arange(1, run.size + 1, dtype=float)
    b = convergence_bound(consts.smoothness, consts.initial_gap, consts.grad_variance, T,
                          consts.approx_error, c)
    tol = rel_tol * float(np.max(np.abs(b)))
    rep = BoundReport("convergence", run[skip:].tolist(), b[skip:].tolist(),
                      {**consts.to_dict(), "c": c}, tolerance=tol,
                      required_fraction=required_fraction)
    rep.extra = {"skip": skip, "loglog_slope": loglog_slope(run),
                 "steps": int(run.size)}
    rep.notes.append("log-log slope of the running mean is reported, no exponent is asserted")
    return rep


@dataclass
class QuadraticProblem:
    """``f(x) = 0.5 x^T A x`` with A symmetric PSD; L = lambda_max(A), f* = 0."""

    a: np.ndarray
    x0: np.ndarray

    @classmethod
    def random(cls, dim: int, cond: float, rng: RngState):
        from .matcore import random_orthonormal
        q = random_orthonormal(rng, dim, dim)
        eig = np.geomspace(1.0, cond, dim)
        return cls((q * eig) @ q.T, rng.normal(dim))

    @property
    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.a).max())

    def value(self, x) -> float:
        return 0.5 * float(x @ self.a @ x)

    def grad(self, x):
        return self.a @ x

    def run_gd(self, steps: int, lr: float | None = None):
        """Gradient descent; returns a TrainTrace whose records hold f and ||grad||^2."""
        from .losses import LossBreakdown
        from .optim import TrainRecord, TrainTrace
        lr = 1.0 / self.smoothness if lr is None else lr
        x = self.x0.copy()
        trace = TrainTrace(lr=lr)
        running = 0.0
        for t in range(steps):
            g = self.grad(x)
            gsq = float(g @ g)
            running += (gsq - running) / (t + 1)
            f = self.value(x)
            trace.records.append(TrainRecord(t, LossBreakdown(0.0, f, 0.0, f, 0.0, 1.0), gsq, running))
            x = x - lr * g
        return trace


# ---------------------------------------------------------------- generalization

def covering_number_log(r: int, m: int, n_dim: int, B: float, eps: float) -> float:
    """``r (m + n_dim + 1) log(3B / eps)``: log of the covering-number bound."""
    if r < 1 or m < 1 or n_dim < 1:
        raise InvalidInputError("r, m and n_dim must be >= 1")
    if not (B > 0 and eps > 0):
        raise InvalidInputError("B and eps must be positive")
    if eps > 3 * B:
        raise InvalidInputError("eps must not exceed 3B")
    return r * (m + n_dim + 1) * math.log(3.0 * B / eps)


def generalization_bound(r: int, m: int, n_dim: int, n_samples: float, delta: float,
                         k1: float = 1.0, k2: float = 1.0) -> float:
    """``k1 r (m + n_dim) log(n) / sqrt(n) + k2 sqrt(log(1/delta) / n)``."""
    if not 0 < delta <= 1:
        raise InvalidInputError("delta must lie in (0, 1]")
    if n_samples < 2:
        raise InvalidInputError("n_samples must be >= 2")
    if r < 0 or m < 0 or n_dim < 0 or k1 < 0 or k2 < 0:
        raise InvalidInputError("negative argument")
    n = float(n_samples)
    return k1 * r * (m + n_dim) * math.log(n) / math.sqrt(n) + k2 * math.sqrt(math.log(1.0 / delta) / n)


def measure_generalization_gap(student: StudentModel, teacher: TeacherModel, train, heldout,
                               batch_size: int = 64, max_windows: int | None = None) -> float:
    """Held-out minus train mean LM loss over non-overlapping windows."""
    from .data import sequential_batches
    from .optim import lm_eval
    if len(train) == 0 or len(heldout) == 0:
        raise InvalidInputError("empty split")
    seq = student.teacher_config.seq_len
    tr = sequential_batches(train, batch_size, seq, max_windows)
    ho = sequential_batches(heldout, batch_size, seq, max_windows)
    return lm_eval(student, teacher, ho) - lm_eval(student, teacher, tr)


# ---------------------------------------------------------------- mutual information

@dataclass(frozen=True)
class GaussianMIModel:
    """Isotropic teacher/student pair: both N(0, s2 I), per-coordinate correlation rho."""

    d: int
    sigma2: float
    rho: float

    def __post_init__(self):
        if self.d < 1:
            raise InvalidInputError("d must be >= 1")
        if not self.sigma2 > 0:
            raise InvalidInputError("sigma2 must be positive")
        if not abs(self.rho) < 1:
            raise InvalidInputError("|rho| must be < 1")

    @property
    def cov_t(self):
        return self.sigma2 * np.eye(self.d)

    @property
    def cov_s(self):
        return self.sigma2 * np.eye(self.d)

    @property
    def cov_ts(self):
        return self.rho * self.sigma2 * np.eye(self.d)

    @property
    def joint(self):
        return np.block([[self.cov_t, self.cov_ts], [self.cov_ts.T, self.cov_s]])

    def mi(self) -> float:
        return gaussian_mi(self.rho, self.d)

    def clone_loss(self) -> float:
        return clone_loss_from_correlation(self.sigma2, self.rho, self.d)

    def sample(self, n: int, rng: RngState):
        z = rng.normal((n, 2 * self.d))
        x = math.sqrt(self.sigma2) * z[:, :self.d]
        y = math.sqrt(self.sigma2) * (self.rho * z[:, :self.d]
                                      + math.sqrt(1 - self.rho ** 2) * z[:, self.d:])
        return x, y


def gaussian_mi(rho: float, d: int) -> float:
    if not abs(rho) < 1:
        raise InvalidInputError("|rho| must be < 1")
    if d < 1:
        raise InvalidInputError("d must be >= 1")
    return -0.5 * d * math.log1p(-rho * rho)


def clone_loss_from_correlation(sigma2: float, rho: float, d: int) -> float:
    """Expected ``||h_t - h_s||^2`` under the isotropic model: ``2 d s2 (1 - rho)``."""
    if not sigma2 > 0:
        raise InvalidInputError("sigma2 must be positive")
    return 2.0 * d * sigma2 * (1.0 - rho)


def mi_lower_bound(clone_loss_value: float, d: int, const: float = 0.0) -> float:
    if d < 1:
        raise InvalidInputError("d must be >= 1")
    return math.log(d) - 0.5 * d * clone_loss_value + const


def _chain_gap(rho, d):
    # gaussian_mi - (log d - (d/2) * clone_loss(1, rho, d)), const excluded
    return -0.5 * d * np.log1p(-rho * rho) - math.log(d) + d * d * (1.0 - rho)


def calibrate_mi_const(d: int, mode: str = "infimum") -> float:
    """Constant for the MI lower bound on the unit-variance Gaussian model.

    ``mode="infimum"`` takes the infimum over rho in [0, 1) of
    ``gaussian_mi - (log d - (d/2) clone_loss)``; the minimizer solves
    ``d rho^2 + rho - d = 0``. ``mode="tight_at_zero"`` makes the bound an
    equality at rho = 0 instead (kept for comparison; the chain then fails for
    every rho > 0).
    """
    if mode == "tight_at_zero":
        return float(_chain_gap(np.float64(0.0), d))
    if mode != "infimum":
        raise InvalidInputError(f"unknown calibration mode {mode!r}")
    rho_star = (-1.0 + math.sqrt(1.0 + 4.0 * d * d)) / (2.0 * d)
    return float(_chain_gap(np.float64(rho_star), d))


def mi_chain_report(dims=(1, 8, 32), rhos=None, mode: str = "infimum") -> BoundReport:
    rhos = np.round(np.arange(0.0, 0.95, 0.1), 10) if rhos is None else np.asarray(rhos)
    measured, bound, consts = [], [], {}
    for d in dims:
        const = calibrate_mi_const(d, mode)
        consts[f"const_d{d}"] = const
        for rho in rhos:
            # the bound plays the "measured" role: it must not exceed the true MI
            measured.append(mi_lower_bound(clone_loss_from_correlation(1.0, float(rho), d), d, const))
            bound.append(gaussian_mi(float(rho), d))
    rep = BoundReport("mi_chain", measured, bound, consts, tolerance=1e-9)
    rep.extra = {"dims": list(dims), "rhos": [float(r) for r in rhos], "calibration": mode}
    rep.notes.append("sigma2 = 1; the stated bound has no sigma2 dependence, calibration absorbs it")
    return rep


def estimate_mi_knn(x, y, k: int = 3, jitter: float = 1e-10, seed: int = 0) -> float:
    """KSG (algorithm 1) mutual information estimate in nats.

    Coordinates are standardized, then a tiny seeded jitter breaks distance
    ties. Neighbour counts use the max-norm in each marginal space.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    n = x.shape[0]
    if y.shape[0] != n:
        raise InvalidInputError("sample counts differ")
    if n < 100:
        raise InvalidInputError("need at least 100 samples")
    if not 3 <= k <= 10:
        raise InvalidInputError("k must lie in [3, 10]")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise InvalidInputError("non-finite samples")

    def prep(a, tag):
        sd = a.std(axis=0)
        if not np.any(sd > 0):
            raise InvalidInputError("degenerate samples: all identical")
        a = (a - a.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        if jitter > 0:
            a = a + jitter * RngState(seed, tag).normal(a.shape)
        return a

    x = prep(x, 1)
    y = prep(y, 2)
    joint = np.hstack([x, y])
    dist, _ = cKDTree(joint).query(joint, k=k + 1, p=np.inf)
    radius = np.nextafter(dist[:, -1], 0)  # strict inequality
    nx = cKDTree(x).query_ball_point(x, radius, p=np.inf, return_length=True) - 1
    ny = cKDTree(y).query_ball_point(y, radius, p=np.inf, return_length=True) - 1
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))


def top_principal_components(a, k: int = 8) -> np.ndarray:
    """Project rows of ``a`` (flattened to 2-D) onto its top-k principal directions."""
    a = np.asarray(a, dtype=float).reshape(-1, np.shape(a)[-1])
    a = a - a.mean(axis=0)
    k = min(k, a.shape[1])
    f = svd(a)
    return a @ f.V[:, :k]


def activation_mi(teacher_trace, student_trace, k_pcs: int = 8, k: int = 3,
                  max_points: int | None = None) -> dict:
    """Per-layer KSG MI between teacher and student hidden / attention activations."""
    out = {}
    for kind in ("hidden", "attn"):
        vals = []
        for at, as_ in zip(getattr(teacher_trace, kind), getattr(student_trace, kind)):
            xt = top_principal_components(at, k_pcs)
            xs = top_principal_components(as_, k_pcs)
            if max_points is not None:
                xt, xs = xt[:max_points], xs[:max_points]
            vals.append(estimate_mi_knn(xt, xs, k))
        out[kind] = vals
    return out


# ---------------------------------------------------------------- Corollary 1

def rank_objective(r, c1: float, c2: float, n_samples: float):
    r = np.asarray(r, dtype=float)
    return c1 / r + c2 * r / n_samples


def optimal_rank(c1: float, c2: float, n_samples: float) -> float:
    if not (c1 > 0 and c2 > 0 and n_samples > 0):
        raise InvalidInputError("C1, C2 and n_samples must be positive")
    return math.sqrt(c1 * n_samples / c2)


@dataclass
class RankFit:
    n_samples: list
    ranks: list
    slope: float
    intercept: float
    correlation: float
    # C2 is fixed to 1: only the ratio C1/C2 is identifiable from r*(n)
    c1: float
    c2: float = 1.0

    def to_dict(self) -> dict:
        return _clean(asdict(self))


def fit_rank_law(points) -> RankFit:
    """Least-squares fit of ``log r* = a + b log n`` over ``(n, r*)`` pairs.

    C1/C2 is implied by the square-root law: ``exp(2 mean(log r* - 0.5 log n))``.
    """
    pts = [(float(n), float(r)) for n, r in points]
    if len({n for n, _ in pts}) < 4:
        raise InsufficientDataError("need at least 4 distinct n values")
    if any(n <= 0 or r <= 0 for n, r in pts):
        raise InvalidInputError("n and r* must be positive")
    ln = np.log([p[0] for p in pts])
    lr = np.log([p[1] for p in pts])
    slope, intercept = np.polyfit(ln, lr, 1)
    if np.ptp(lr) == 0:
        corr = 0.0
    else:
        corr = float(np.corrcoef(ln, lr)[0, 1])
    c1 = float(math.exp(2.0 * np.mean(lr - 0.5 * ln)))
    return RankFit([p[0] for p in pts], [p[1] for p in pts], float(slope), float(intercept),
                   corr, c1)
