"""Decoder-only transformer teacher and its low-rank-clone student.

Both models run through the same forward/backward code on a dict of
*effective* weights. The teacher's effective weights are its parameters; the
student's are composed on the fly as ``P_left @ W_t @ P_right`` from the frozen
teacher, so every student linear map lives in the span of the teacher's.

Row-vector convention throughout: activations are ``(batch, seq, dim)`` and a
linear map is ``x @ W`` with ``W`` of shape ``(in, out)``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels, losses
from .errors import InvalidInputError
from .lowrank import LowRankFactors, init_projections, projection_gradients, _extend_basis
from .matcore import RngState, random_orthonormal, svd

LN_EPS = 1e-9
ATTN_MAPS = ("wq", "wk", "wv", "wo")
FFN_MAPS = ("w1", "w2")
LAYER_MAPS = ATTN_MAPS + FFN_MAPS
CKPT_MAGIC = b"LRC1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    num_layers: int = 2
    hidden_dim: int = 32
    num_heads: int = 4
    seq_len: int = 64
    ff_mult: int = 4

    def __post_init__(self):
        if self.num_layers < 1 or self.seq_len < 1 or self.vocab_size < 2:
            raise InvalidInputError("num_layers, seq_len must be >= 1 and vocab_size >= 2")
        if self.hidden_dim < 1 or self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise InvalidInputError("hidden_dim must be divisible by num_heads")
        if self.ff_mult < 1:
            raise InvalidInputError("ff_mult must be >= 1")

    @property
    def ff_dim(self) -> int:
        return self.ff_mult * self.hidden_dim


def student_heads(num_heads: int, rank: int) -> int:
    return math.gcd(num_heads, rank)


@dataclass
class ActivationTrace:
    hidden: list
    attn: list
    logits: np.ndarray
    tokens: np.ndarray
    cache: dict = field(default=None, repr=False)


@dataclass
class TeacherModel:
    config: ModelConfig
    params: dict

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


@dataclass
class StudentModel:
    """Trainable projections of a frozen teacher.

    ``params`` keys: ``emb``/``pos`` (d x r) right-project the teacher's
    embedding tables, ``head`` (r x d) left-projects the output head,
    ``{l}.{map}.L`` / ``{l}.{map}.R`` are the factor pairs, layer-norm vectors
    keep the teacher's key names, and ``{l}.up_h`` / ``{l}.up_a`` (d x r) lift
    student activations into teacher space for the clone loss.
    """

    teacher_config: ModelConfig
    rank: int
    params: dict

    @property
    def config(self) -> ModelConfig:
        c = self.teacher_config
        return replace(c, hidden_dim=self.rank, num_heads=student_heads(c.num_heads, self.rank))

    def factors(self, layer: int, name: str, w_t) -> LowRankFactors:
        return LowRankFactors(self.params[f"{layer}.{name}.L"], self.params[f"{layer}.{name}.R"],
                              tuple(np.shape(w_t)))

    def num_params(self, include_up: bool = True) -> int:
        return sum(v.size for k, v in self.params.items() if include_up or ".up_" not in k)

    def copy(self) -> "StudentModel":
        return StudentModel(self.teacher_config, self.rank, {k: v.copy() for k, v in self.params.items()})


# ---------------------------------------------------------------- init

def init_teacher(config: ModelConfig, rng: RngState) -> TeacherModel:
    d, ff, v, L = config.hidden_dim, config.ff_dim, config.vocab_size, config.num_layers
    resid_scale = 1.0 / math.sqrt(2 * L)
    p = {"tok": 0.5 * rng.normal((v, d)), "pos": 0.1 * rng.normal((config.seq_len, d))}
    for l in range(L):
        p[f"{l}.ln1_g"] = np.ones(d)
        p[f"{l}.ln1_b"] = np.zeros(d)
        for name in ATTN_MAPS:
            std = 1.0 / math.sqrt(d) * (resid_scale if name == "wo" else 1.0)
            p[f"{l}.{name}"] = std * rng.normal((d, d))
        p[f"{l}.ln2_g"] = np.ones(d)
        p[f"{l}.ln2_b"] = np.zeros(d)
        p[f"{l}.w1"] = rng.normal((d, ff)) / math.sqrt(d)
        p[f"{l}.w2"] = rng.normal((ff, d)) / math.sqrt(ff) * resid_scale
    p["lnf_g"] = np.ones(d)
    p["lnf_b"] = np.zeros(d)
    p["head"] = rng.normal((d, v)) / math.sqrt(d)
    return TeacherModel(config, p)


def _right_basis(w_t, r, mode, rng):
    # d x r basis for a right projection of an embedding-like table (rows x d)
    d = w_t.shape[1]
    if mode == "svd":
        return _extend_basis(svd(w_t).V, r, None)
    if mode == "random":
        return random_orthonormal(rng, d, r)
    if mode == "identity":
        return np.eye(d, r)
    raise InvalidInputError(f"unknown init mode {mode!r}")


def init_student(teacher: TeacherModel, rank: int, mode: str = "svd",
                 rng: RngState | None = None) -> StudentModel:
    c = teacher.config
    d, L = c.hidden_dim, c.num_layers
    if not 1 <= rank <= d:
        raise InvalidInputError(f"rank {rank} outside [1, {d}]")
    if mode == "random" and rng is None:
        raise InvalidInputError("random init needs an RngState")
    tp = teacher.params
    r_ff = c.ff_mult * rank
    p = {}
    p["emb"] = _right_basis(tp["tok"], rank, mode, rng)
    p["pos"] = _right_basis(tp["pos"], rank, mode, rng)
    basis = p["emb"]
    sq = basis * basis
    for l in range(L):
        for ln in ("ln1", "ln2"):
            p[f"{l}.{ln}_g"] = sq.T @ tp[f"{l}.{ln}_g"]
            p[f"{l}.{ln}_b"] = tp[f"{l}.{ln}_b"] @ basis
        for name in LAYER_MAPS:
            r_left, r_right = rank, rank
            if name == "w1":
                r_right = r_ff
            elif name == "w2":
                r_left = r_ff
            f = init_projections(tp[f"{l}.{name}"], r_left, mode, rng, r_right=r_right)
            p[f"{l}.{name}.L"] = f.p_left
            p[f"{l}.{name}.R"] = f.p_right
    p["lnf_g"] = sq.T @ tp["lnf_g"]
    p["lnf_b"] = tp["lnf_b"] @ basis
    p["head"] = _right_basis(tp["head"].T, rank, mode, rng).T
    for l in range(L):
        p[f"{l}.up_h"] = basis.copy()
        p[f"{l}.up_a"] = basis.copy()
    return StudentModel(c, rank, {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in p.items()})


def compose_weights(student: StudentModel, teacher_params: dict) -> dict:
    """Effective student weights from factors and (frozen) teacher weights."""
    sp = student.params
    L = student.teacher_config.num_layers
    w = {"tok": teacher_params["tok"] @ sp["emb"], "pos": teacher_params["pos"] @ sp["pos"]}
    for l in range(L):
        for ln in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            w[f"{l}.{ln}"] = sp[f"{l}.{ln}"]
        for name in LAYER_MAPS:
            w[f"{l}.{name}"] = sp[f"{l}.{name}.L"] @ teacher_params[f"{l}.{name}"] @ sp[f"{l}.{name}.R"]
    w["lnf_g"] = sp["lnf_g"]
    w["lnf_b"] = sp["lnf_b"]
    w["head"] = sp["head"] @ teacher_params["head"]
    return w


# ---------------------------------------------------------------- kernels

def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_bwd(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dg, db


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _check_tokens(tokens, config: ModelConfig):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise InvalidInputError("tokens must be (batch, seq) or (seq,)")
    if tokens.shape[1] > config.seq_len:
        raise InvalidInputError(f"sequence length {tokens.shape[1]} exceeds {config.seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise InvalidInputError("token id out of range")
    return tokens.astype(np.int64)


def forward(weights: dict, config: ModelConfig, tokens, keep_cache: bool = True) -> ActivationTrace:
    """Run the transformer on effective weights; ``config`` supplies dims/heads."""
    tokens = _check_tokens(tokens, config)
    B, T = tokens.shape
    D, H, L = config.hidden_dim, config.num_heads, config.num_layers
    hd = D // H
    scale = 1.0 / math.sqrt(hd)
    mask = np.tril(np.ones((T, T), dtype=bool))
    x = weights["tok"][tokens] + weights["pos"][:T][None]
    hidden, attn, layers = [], [], []
    for l in range(L):
        n1, ln1c = _ln_fwd(x, weights[f"{l}.ln1_g"], weights[f"{l}.ln1_b"])
        q = (n1 @ weights[f"{l}.wq"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        k = (n1 @ weights[f"{l}.wk"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        v = (n1 @ weights[f"{l}.wv"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = np.where(mask, s, -np.inf)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        p = e / e.sum(axis=-1, keepdims=True)
        y = (p @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        a = y @ weights[f"{l}.wo"]
        x = x + a
        n2, ln2c = _ln_fwd(x, weights[f"{l}.ln2_g"], weights[f"{l}.ln2_b"])
        u = n2 @ weights[f"{l}.w1"]
        gu, t = kernels.gelu_fwd(u)
        x = x + gu @ weights[f"{l}.w2"]
        hidden.append(x)
        attn.append(a)
        if keep_cache:
            layers.append(dict(n1=n1, ln1=ln1c, q=q, k=k, v=v, p=p, y=y, n2=n2, ln2=ln2c, u=u, gu=gu, t=t))
    xf, lnfc = _ln_fwd(x, weights["lnf_g"], weights["lnf_b"])
    logits = xf @ weights["head"]
    cache = None
    if keep_cache:
        cache = dict(layers=layers, xf=xf, lnf=lnfc, weights=weights, config=config)
    return ActivationTrace(hidden=hidden, attn=attn, logits=logits, tokens=tokens, cache=cache)


def backward_weights(trace: ActivationTrace, dlogits, dhidden=None, dattn=None) -> dict:
    """Gradients of the effective weights given upstream activation gradients."""
    c = trace.cache
    if c is None:
        raise InvalidInputError("trace was produced without a cache")
    w, cfg = c["weights"], c["config"]
    B, T = trace.tokens.shape
    D, H, L = cfg.hidden_dim, cfg.num_heads, cfg.num_layers
    hd = D // H
    scale = 1.0 / math.sqrt(hd)
    g = {}
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != trace.logits.shape:
        raise InvalidInputError("logit gradient shape does not match the trace")
    g["head"] = _flat(c["xf"]).T @ _flat(dlogits)
    dxf = dlogits @ w["head"].T
    dx, g["lnf_g"], g["lnf_b"] = _ln_bwd(dxf, w["lnf_g"], c["lnf"])
    for l in reversed(range(L)):
        lc = c["layers"][l]
        if dhidden is not None and dhidden[l] is not None:
            dx = dx + dhidden[l]
        # feed-forward
        g[f"{l}.w2"] = _flat(lc["gu"]).T @ _flat(dx)
        dgu = dx @ w[f"{l}.w2"].T
        du = kernels.gelu_bwd(dgu, lc["u"], lc["t"])
        g[f"{l}.w1"] = _flat(lc["n2"]).T @ _flat(du)
        dn2 = du @ w[f"{l}.w1"].T
        dres, g[f"{l}.ln2_g"], g[f"{l}.ln2_b"] = _ln_bwd(dn2, w[f"{l}.ln2_g"], lc["ln2"])
        dx = dx + dres
        # attention
        da = dx
        if dattn is not None and dattn[l] is not None:
            da = da + dattn[l]
        g[f"{l}.wo"] = _flat(lc["y"]).T @ _flat(da)
        dy = (da @ w[f"{l}.wo"].T).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        p, q, k, v = lc["p"], lc["q"], lc["k"], lc["v"]
        dp = dy @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ dy
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = (ds @ k) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
        dq = dq.transpose(0, 2, 1, 3).reshape(B, T, D)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, T, D)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, T, D)
        n1f = _flat(lc["n1"])
        g[f"{l}.wq"] = n1f.T @ _flat(dq)
        g[f"{l}.wk"] = n1f.T @ _flat(dk)
        g[f"{l}.wv"] = n1f.T @ _flat(dv)
        dn1 = dq @ w[f"{l}.wq"].T + dk @ w[f"{l}.wk"].T + dv @ w[f"{l}.wv"].T
        dres, g[f"{l}.ln1_g"], g[f"{l}.ln1_b"] = _ln_bwd(dn1, w[f"{l}.ln1_g"], lc["ln1"])
        dx = dx + dres
    g["_dx0"] = dx
    return g


# ---------------------------------------------------------------- public API

def teacher_forward(teacher: TeacherModel, tokens, keep_cache: bool = False) -> ActivationTrace:
    return forward(teacher.params, teacher.config, tokens, keep_cache=keep_cache)


def student_forward(student: StudentModel, teacher: TeacherModel, tokens,
                    teacher_params: dict | None = None, keep_cache: bool = True) -> ActivationTrace:
    """Forward pass of the student; ``teacher_params`` overrides the weights it projects."""
    tp = teacher.params if teacher_params is None else teacher_params
    weights = compose_weights(student, tp)
    trace = forward(weights, student.config, tokens, keep_cache=keep_cache)
    if trace.cache is not None:
        trace.cache["teacher_params"] = tp
    return trace


@dataclass
class LossGrads:
    """Upstream gradients for :func:`backward`; ``up`` maps up-projector names to grads."""

    logits: np.ndarray
    hidden: list = None
    attn: list = None
    up: dict = None


def backward(student: StudentModel, teacher: TeacherModel, trace: ActivationTrace,
             loss_grads: LossGrads, tokens=None) -> dict:
    """Gradients for every trainable student parameter (teacher untouched)."""
    if trace.cache is None or "teacher_params" not in trace.cache:
        raise InvalidInputError("backward needs a cached student trace")
    if tokens is not None:
        tok = _check_tokens(tokens, student.config)
        if tok.shape != trace.tokens.shape or not np.array_equal(tok, trace.tokens):
            raise InvalidInputError("trace was computed for different tokens")
    tp = trace.cache["teacher_params"]
    sp = student.params
    gw = backward_weights(trace, loss_grads.logits, loss_grads.hidden, loss_grads.attn)
    dx0 = gw.pop("_dx0")
    T = trace.tokens.shape[1]
    grads = {}
    grads["emb"] = _flat(tp["tok"][trace.tokens]).T @ _flat(dx0)
    grads["pos"] = tp["pos"][:T].T @ dx0.sum(axis=0)
    L = student.teacher_config.num_layers
    for l in range(L):
        for ln in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            grads[f"{l}.{ln}"] = gw[f"{l}.{ln}"]
        for name in LAYER_MAPS:
            w_t = tp[f"{l}.{name}"]
            gl, gr = projection_gradients(gw[f"{l}.{name}"], w_t, student.factors(l, name, w_t))
            grads[f"{l}.{name}.L"] = gl
            grads[f"{l}.{name}.R"] = gr
    grads["lnf_g"] = gw["lnf_g"]
    grads["lnf_b"] = gw["lnf_b"]
    grads["head"] = gw["head"] @ tp["head"].T
    up = loss_grads.up or {}
    for l in range(L):
        for key in (f"{l}.up_h", f"{l}.up_a"):
            grads[key] = np.array(up[key]) if key in up else np.zeros_like(sp[key])
    return {k: grads[k] for k in sp}


def distill_objective(student: StudentModel, teacher: TeacherModel, batch, lam: float = 1.0,
                      tau: float = 2.0, use_kd: bool = True, use_lm: bool = True,
                      use_clone: bool = True, teacher_trace: ActivationTrace | None = None,
                      teacher_params: dict | None = None, need_grad: bool = True):
    """Total distillation loss on ``batch`` and (optionally) its gradient.

    ``teacher_params`` replaces the teacher weights inside the student's
    composition only; targets always come from the real teacher.
    Returns ``(LossBreakdown, grads or None, student_trace)``.
    """
    if teacher_trace is None:
        teacher_trace = teacher_forward(teacher, batch.inputs)
    strace = student_forward(student, teacher, batch.inputs, teacher_params=teacher_params,
                             keep_cache=need_grad)
    kd_val, g_kd = losses.kd_loss(teacher_trace.logits, strace.logits, tau)
    lm_val, g_lm = losses.lm_loss(strace.logits, batch.targets)
    L = student.teacher_config.num_layers
    ups_h = [student.params[f"{l}.up_h"] for l in range(L)]
    ups_a = [student.params[f"{l}.up_a"] for l in range(L)]
    cl_val, norm, g_cl = losses.clone_loss(teacher_trace.hidden, teacher_trace.attn,
                                           strace.hidden, strace.attn, ups_h, ups_a)
    w_kd = 1.0 if use_kd else 0.0
    w_lm = 1.0 if use_lm else 0.0
    lam_eff = float(lam) if use_clone else 0.0
    breakdown = losses.total_loss(kd_val, lm_val, cl_val, lam_eff, tau, norm, w_kd, w_lm)
    if not need_grad:
        return breakdown, None, strace
    dlogits = w_kd * g_kd + w_lm * g_lm
    up = {}
    dh = da = None
    if lam_eff != 0.0:
        dh = [lam_eff * x for x in g_cl["hidden"]]
        da = [lam_eff * x for x in g_cl["attn"]]
        for l in range(L):
            up[f"{l}.up_h"] = lam_eff * g_cl["up_h"][l]
            up[f"{l}.up_a"] = lam_eff * g_cl["up_a"][l]
    grads = backward(student, teacher, strace, LossGrads(dlogits, dh, da, up))
    return breakdown, grads, strace


def flatten(params: dict) -> np.ndarray:
    return np.concatenate([np.ravel(v) for v in params.values()])


def unflatten(vec: np.ndarray, like: dict) -> dict:
    out, i = {}, 0
    for k, v in like.items():
        out[k] = vec[i:i + v.size].reshape(v.shape).copy()
        i += v.size
    return out


def grad_check(student: StudentModel, teacher: TeacherModel, batch, h: float = 1e-5,
               lam: float = 1.0, tau: float = 2.0, groups=None) -> float:
    """Max over parameters of ``|analytic - central| / max(1, |central|)``."""
    if student.num_params() > 50_000:
        raise InvalidInputError("model too large for exhaustive finite differences")
    tt = teacher_forward(teacher, batch.inputs)
    _, grads, _ = distill_objective(student, teacher, batch, lam, tau, teacher_trace=tt)
    probe = student.copy()

    def f():
        return distill_objective(probe, teacher, batch, lam, tau, teacher_trace=tt,
                                 need_grad=False)[0].total

    worst = 0.0
    for key, arr in probe.params.items():
        if groups is not None and key not in groups:
            continue
        flat = arr.reshape(-1)
        gflat = grads[key].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            cd = (fp - fm) / (2 * h)
            err = abs(gflat[i] - cd) / max(1.0, abs(cd))
            worst = max(worst, err)
    return worst


def trainable_map_counts(student: StudentModel) -> dict:
    """Per-map parameter counts ``(student, teacher)`` for the factored linear maps."""
    c = student.teacher_config
    d, ff = c.hidden_dim, c.ff_dim
    out = {}
    for l in range(c.num_layers):
        for name in LAYER_MAPS:
            m, n = {"w1": (d, ff), "w2": (ff, d)}.get(name, (d, d))
            s = student.params[f"{l}.{name}.L"].size + student.params[f"{l}.{name}.R"].size
            out[f"{l}.{name}"] = (s, m * n)
    return out


# ---------------------------------------------------------------- checkpoints

def _config_fields(config: ModelConfig):
    return [config.vocab_size, config.num_layers, config.hidden_dim, config.num_heads,
            config.seq_len, config.ff_mult]


def save_checkpoint(model, path) -> None:
    """Write a teacher or student checkpoint.

    Layout (little-endian): ``b"LRC1"``; eight int64 header fields
    ``kind (0 teacher, 1 student), vocab_size, num_layers, hidden_dim,
    num_heads, seq_len, ff_mult, rank`` (dims are the teacher's); int64 tensor
    count; then per tensor: int64 name length, UTF-8 name, int64 rows, int64
    cols, rows*cols float64 values row-major. Vectors are stored as 1 x n.
    """
    if isinstance(model, TeacherModel):
        kind, cfg, rank = 0, model.config, 0
    elif isinstance(model, StudentModel):
        kind, cfg, rank = 1, model.teacher_config, model.rank
    else:
        raise InvalidInputError("can only checkpoint TeacherModel or StudentModel")
    parts = [CKPT_MAGIC, struct.pack("<8q", kind, *_config_fields(cfg), rank),
             struct.pack("<q", len(model.params))]
    for name, arr in model.params.items():
        arr = np.asarray(arr, dtype=np.float64)
        mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
        nb = name.encode("utf-8")
        parts.append(struct.pack("<q", len(nb)) + nb + struct.pack("<qq", *mat.shape))
        parts.append(np.ascontiguousarray(mat).astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise InvalidInputError(f"{path} is not an LRC1 checkpoint")
    kind, vocab, layers, hidden, heads, seq_len, ff_mult, rank = struct.unpack_from("<8q", raw, 4)
    off = 4 + 64
    (count,) = struct.unpack_from("<q", raw, off)
    off += 8
    cfg = ModelConfig(vocab, layers, hidden, heads, seq_len, ff_mult)
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<q", raw, off)
        off += 8
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        rows, cols = struct.unpack_from("<qq", raw, off)
        off += 16
        arr = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=off).astype(np.float64)
        off += 8 * rows * cols
        arr = arr.reshape(rows, cols)
        params[name] = arr[0].copy() if _is_vector(name) else arr.copy()
    if kind == 0:
        return TeacherModel(cfg, params)
    return StudentModel(cfg, rank, params)


def _is_vector(name: str) -> bool:
    return name.endswith(("_g", "_b"))
