"""SGD training for distillation and estimators of the smoothness / noise constants."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Batch, Corpus, sample_batch, sequential_batches
from .errors import DivergenceError, InsufficientDataError, InvalidInputError
from .losses import LossBreakdown
from .matcore import RngState
from .model import (StudentModel, TeacherModel, distill_objective, flatten, forward, teacher_forward,
                    unflatten)
from . import losses as _losses

DIVERGENCE_LIMIT = 1e6
TRACE_COLUMNS = ["step", "kd", "lm", "clone", "total", "grad_sq_norm", "running_mean_grad_sq", "val_loss"]


@dataclass
class SgdConfig:
    lr: float | str = "auto"
    steps: int = 500
    batch_size: int = 8
    seed: int = 0
    lam: float = 1.0
    tau: float = 2.0
    optimizer: str = "sgd"
    use_kd: bool = True
    use_lm: bool = True
    use_clone: bool = True
    eval_every: int = 0
    weight_decay: float = 0.0
    schedule: str = "constant"
    warmup_frac: float = 0.05
    full_batch: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidInputError("steps must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise InvalidInputError(f"unknown schedule {self.schedule!r}")
        if self.lr != "auto" and not float(self.lr) > 0:
            raise InvalidInputError("learning rate must be positive or 'auto'")


@dataclass
class TrainRecord:
    step: int
    loss: LossBreakdown
    grad_sq_norm: float
    running_mean_grad_sq: float
    val_loss: float | None = None


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    lr: float = float("nan")

    def __len__(self):
        return len(self.records)

    def grad_sq_norms(self) -> np.ndarray:
        return np.array([r.grad_sq_norm for r in self.records])

    def running_mean(self) -> np.ndarray:
        return np.array([r.running_mean_grad_sq for r in self.records])

    def totals(self) -> np.ndarray:
        return np.array([r.loss.total for r in self.records])

    def val_points(self):
        return [(r.step, r.val_loss) for r in self.records if r.val_loss is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow([r.step, repr(r.loss.kd), repr(r.loss.lm), repr(r.loss.clone), repr(r.loss.total),
                        repr(r.grad_sq_norm), repr(r.running_mean_grad_sq),
                        "" if r.val_loss is None else repr(r.val_loss)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainTrace":
        rows = list(csv.DictReader(io.StringIO(text)))
        recs = []
        for row in rows:
            lb = _losses.total_loss(float(row["kd"]), float(row["lm"]), float(row["clone"]), 0.0)
            lb.total = float(row["total"])
            recs.append(TrainRecord(int(row["step"]), lb, float(row["grad_sq_norm"]),
                                    float(row["running_mean_grad_sq"]),
                                    float(row["val_loss"]) if row["val_loss"] else None))
        return cls(recs)


@dataclass
class ConstantEstimates:
    smoothness: float
    grad_variance: float
    approx_error: float
    initial_gap: float

    def to_dict(self) -> dict:
        return {"L": self.smoothness, "sigma2": self.grad_variance, "eps": self.approx_error,
                "delta0": self.initial_gap}


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    """``theta - lr * g`` for every parameter group (new dict, inputs untouched)."""
    if params.keys() != grads.keys():
        raise InvalidInputError("parameter and gradient groups differ")
    out = {}
    for k, p in params.items():
        g = grads[k]
        if np.shape(p) != np.shape(g):
            raise InvalidInputError(f"shape mismatch for {k}: {np.shape(p)} vs {np.shape(g)}")
        out[k] = p - lr * g
    return out


class Adam:
    """AdamW with decoupled weight decay (experiment mode only)."""

    def __init__(self, params: dict, weight_decay: float = 0.0, b1=0.9, b2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.wd, self.b1, self.b2, self.eps = weight_decay, b1, b2, eps

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = p - lr * (upd + self.wd * p)
        return out


def grad_sq_norm(grads: dict) -> float:
    return float(sum(np.sum(g * g) for g in grads.values()))


# ---------------------------------------------------------------- estimators

def estimate_smoothness(grad_fn, theta0: np.ndarray, num_probes: int = 10,
                        rng: RngState | None = None, radii=(1e-3, 1e-2)) -> float:
    """Empirical gradient-Lipschitz constant around ``theta0``.

    Max over probe pairs ``(theta, theta + delta)`` of
    ``||grad(theta + delta) - grad(theta)|| / ||delta||``. The first probes use
    random directions; the remaining ones follow power iteration on the
    finite-difference Hessian action so the top curvature direction is found.
    """
    if num_probes < 10:
        raise InvalidInputError("need at least 10 probes")
    rng = rng or RngState(0)
    theta0 = np.asarray(theta0, dtype=np.float64)
    g0 = grad_fn(theta0)
    n_random = max(2, num_probes // 3)
    best = 0.0
    direction = None
    for i in range(num_probes):
        radius = radii[i % len(radii)]
        if i < n_random or direction is None:
            d = rng.normal(theta0.shape)
        else:
            d = direction
        nd = np.linalg.norm(d)
        if nd == 0:
            d = rng.normal(theta0.shape)
            nd = np.linalg.norm(d)
        delta = d * (radius / nd)
        diff = grad_fn(theta0 + delta) - g0
        ratio = float(np.linalg.norm(diff) / radius)
        best = max(best, ratio)
        if np.linalg.norm(diff) > 0:
            direction = diff
    return best


def estimate_grad_variance(grad_fn, batches_, full_grad: np.ndarray) -> float:
    """Mean of ``||g(batch) - full_grad||^2`` over the supplied mini-batches."""
    batches_ = list(batches_)
    if len(batches_) < 2:
        raise InsufficientDataError("need at least 2 mini-batches")
    return float(np.mean([np.sum((grad_fn(b) - full_grad) ** 2) for b in batches_]))


class DistillProblem:
    """Flat-vector view of the distillation objective for the estimators."""

    def __init__(self, student: StudentModel, teacher: TeacherModel, cfg: SgdConfig):
        self.student = student.copy()
        self.teacher = teacher
        self.cfg = cfg
        self._cache = {}

    def _teacher_trace(self, batch):
        key = id(batch)
        if key not in self._cache:
            self._cache[key] = (batch, teacher_forward(self.teacher, batch.inputs))
        return self._cache[key][1]

    def loss_and_grad(self, theta: np.ndarray, batch):
        self.student.params = unflatten(theta, self.student.params)
        c = self.cfg
        lb, grads, _ = distill_objective(self.student, self.teacher, batch, c.lam, c.tau, c.use_kd,
                                         c.use_lm, c.use_clone, teacher_trace=self._teacher_trace(batch))
        return lb.total, flatten(grads)

    def grad(self, theta, batch):
        return self.loss_and_grad(theta, batch)[1]

    def theta(self) -> np.ndarray:
        return flatten(self.student.params)


def concat_batches(batch_list) -> Batch:
    return Batch(np.concatenate([b.inputs for b in batch_list]), np.concatenate([b.targets for b in batch_list]))


def estimate_model_smoothness(student, teacher, probe_batch: Batch, cfg: SgdConfig,
                              num_probes: int = 12, rng: RngState | None = None) -> float:
    prob = DistillProblem(student, teacher, cfg)
    return estimate_smoothness(lambda th: prob.grad(th, probe_batch), prob.theta(), num_probes, rng)


def estimate_model_grad_variance(student, teacher, corpus: Corpus, cfg: SgdConfig,
                                 num_batches: int = 8, rng: RngState | None = None,
                                 full_batch: Batch | None = None) -> float:
    """Mini-batch gradient noise at the student's current parameters.

    ``full_batch`` is the reference population (default: every non-overlapping
    window of the corpus); mini-batches are drawn uniformly from its rows.
    """
    rng = rng or RngState(cfg.seed, 99)
    seq_len = student.teacher_config.seq_len
    if full_batch is None:
        full_batch = concat_batches(sequential_batches(corpus, 64, seq_len))
    prob = DistillProblem(student, teacher, cfg)
    theta = prob.theta()
    full = prob.grad(theta, full_batch)
    n = full_batch.inputs.shape[0]
    picks = []
    for _ in range(num_batches):
        idx = rng.integers(0, n, cfg.batch_size)
        picks.append(Batch(full_batch.inputs[idx], full_batch.targets[idx]))
    return estimate_grad_variance(lambda b: prob.grad(theta, b), picks, full)


# ---------------------------------------------------------------- training

def lm_eval(student, teacher, batches_) -> float:
    """Mean next-token cross-entropy of the student over evaluation batches."""
    from .model import student_forward
    tot, n = 0.0, 0
    for b in batches_:
        tr = student_forward(student, teacher, b.inputs, keep_cache=False)
        loss, _ = _losses.lm_loss(tr.logits, b.targets)
        tot += loss * b.targets.size
        n += b.targets.size
    return tot / n


def _lr_at(cfg: SgdConfig, base: float, step: int) -> float:
    if cfg.schedule == "constant":
        return base
    warm = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step < warm:
        return base * (step + 1) / warm
    prog = (step - warm) / max(1, cfg.steps - warm)
    return base * 0.5 * (1.0 + math.cos(math.pi * prog))


def train(student: StudentModel, teacher: TeacherModel, data: Corpus, cfg: SgdConfig,
          val_batches=None, lr: float | None = None, full_batch: Batch | None = None) -> TrainTrace:
    """Minimize the distillation objective; updates ``student.params`` in place.

    ``cfg.lr == "auto"`` resolves once to ``1 / L_hat`` (unless ``lr`` is passed
    explicitly). With ``full_batch`` every step uses that fixed batch.
    """
    seq_len = student.teacher_config.seq_len
    rng = RngState(cfg.seed, 7)
    if lr is None:
        if cfg.lr == "auto":
            probe = full_batch or sample_batch(data, max(cfg.batch_size, 8), seq_len, RngState(cfg.seed, 11))
            lr = 1.0 / estimate_model_smoothness(student, teacher, probe, cfg, rng=RngState(cfg.seed, 12))
        else:
            lr = float(cfg.lr)
    opt = Adam(student.params, cfg.weight_decay) if cfg.optimizer == "adam" else None
    trace = TrainTrace(lr=lr)
    running = 0.0
    fixed_tt = teacher_forward(teacher, full_batch.inputs) if full_batch is not None else None
    for step in range(cfg.steps):
        if full_batch is not None:
            batch, tt = full_batch, fixed_tt
        else:
            batch = sample_batch(data, cfg.batch_size, seq_len, rng)
            tt = teacher_forward(teacher, batch.inputs)
        lb, grads, _ = distill_objective(student, teacher, batch, cfg.lam, cfg.tau, cfg.use_kd,
                                         cfg.use_lm, cfg.use_clone, teacher_trace=tt)
        gsq = grad_sq_norm(grads)
        if not (np.isfinite(lb.total) and np.isfinite(gsq)) or abs(lb.total) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"loss diverged at step {step} (total={lb.total})", step)
        running += (gsq - running) / (step + 1)
        val = None
        last = step == cfg.steps - 1
        if val_batches is not None and cfg.eval_every and (step % cfg.eval_every == 0 or last):
            val = lm_eval(student, teacher, val_batches)
        trace.records.append(TrainRecord(step, lb, gsq, running, val))
        step_lr = _lr_at(cfg, lr, step)
        if opt is None:
            student.params = sgd_step(student.params, grads, step_lr)
        else:
            student.params = opt.step(student.params, grads, step_lr)
    return trace


def train_teacher(teacher: TeacherModel, data: Corpus, steps: int, batch_size: int, lr: float,
                  seed: int, weight_decay: float = 0.0, schedule: str = "cosine",
                  val_batches=None) -> dict:
    """Language-model pretraining of the teacher (AdamW). Returns final losses."""
    from .model import backward_weights
    cfg_sched = SgdConfig(steps=steps, schedule=schedule, lr=lr)
    opt = Adam(teacher.params, weight_decay)
    rng = RngState(seed, 5)
    last = float("nan")
    for step in range(steps):
        b = sample_batch(data, batch_size, teacher.config.seq_len, rng)
        tr = forward(teacher.params, teacher.config, b.inputs)
        loss, dlog = _losses.lm_loss(tr.logits, b.targets)
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergenceError(f"teacher loss diverged at step {step}", step)
        gw = backward_weights(tr, dlog)
        dx0 = gw.pop("_dx0")
        T = b.inputs.shape[1]
        gtok = np.zeros_like(teacher.params["tok"])
        np.add.at(gtok, b.inputs.reshape(-1), dx0.reshape(-1, dx0.shape[-1]))
        gw["tok"] = gtok
        gpos = np.zeros_like(teacher.params["pos"])
        gpos[:T] = dx0.sum(axis=0)
        gw["pos"] = gpos
        grads = {k: gw[k] for k in teacher.params}
        teacher.params = opt.step(teacher.params, grads, _lr_at(cfg_sched, lr, step))
        last = loss
    out = {"train_loss": last}
    if val_batches is not None:
        tot = n = 0
        for b in val_batches:
            tr = forward(teacher.params, teacher.config, b.inputs, keep_cache=False)
            loss, _ = _losses.lm_loss(tr.logits, b.targets)
            tot += loss * b.targets.size
            n += b.targets.size
        out["val_loss"] = tot / n
    return out
