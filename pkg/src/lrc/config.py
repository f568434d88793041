"""Flat ``key=value`` run configuration with documented defaults.

Lines look like ``steps = 600``; ``#`` starts a comment. Unknown keys are an
error. Serialization writes every resolved key in sorted order, so
parse -> serialize -> parse is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidInputError
from .model import ModelConfig
from .optim import SgdConfig

# key: (type, default, description)
SCHEMA = {
    # model
    "vocab_size": (int, 64, "vocabulary size (256 for text sources)"),
    "num_layers": (int, 2, "transformer blocks"),
    "hidden_dim": (int, 32, "teacher width d"),
    "num_heads": (int, 4, "teacher attention heads"),
    "seq_len": (int, 16, "context length in tokens"),
    "ff_mult": (int, 4, "feed-forward width multiplier"),
    # student
    "rank": (int, 8, "student rank r"),
    "init": (str, "svd", "projection init: svd | random | identity"),
    # distillation optimizer
    "steps": (int, 600, "distillation steps"),
    "batch_size": (int, 32, "sequences per step"),
    "lr": (str, "3e-3", "learning rate, or auto for 1/L_hat"),
    "optimizer": (str, "adam", "sgd | adam"),
    "schedule": (str, "cosine", "constant | cosine"),
    "warmup_frac": (float, 0.05, "fraction of steps with linear warmup (cosine only)"),
    "weight_decay": (float, 0.0, "decoupled weight decay"),
    "tau": (float, 2.0, "KD temperature"),
    "lambda_clone": (float, 1.0, "activation-cloning weight"),
    "use_kd": (bool, True, "include the KD term"),
    "use_lm": (bool, True, "include the LM term"),
    "use_clone": (bool, True, "include the cloning term"),
    "eval_every": (int, 0, "steps between validation evaluations (0: final only)"),
    "eval_windows": (int, 1024, "max held-out windows per evaluation"),
    # teacher
    "teacher_checkpoint": (str, "", "path of a trained teacher; empty: train one"),
    "teacher_data": (str, "separate", "separate: own corpus of teacher_tokens | shared: the student's train set"),
    "teacher_tokens": (int, 200000, "teacher corpus length (teacher_data=separate)"),
    "teacher_steps": (int, 3000, "teacher training steps"),
    "teacher_lr": (float, 3e-3, "teacher AdamW learning rate"),
    "teacher_batch_size": (int, 32, "teacher sequences per step"),
    "teacher_seed": (int, 0, "teacher init / sampling seed"),
    # data
    "data_source": (str, "markov", "markov | text"),
    "text_path": (str, "", "input file for data_source=text"),
    "markov_order": (int, 1, "Markov order (1 or 2)"),
    "markov_kind": (str, "spectral", "transition table: spectral | dirichlet"),
    "markov_scale": (float, 8.0, "logit scale (spectral)"),
    "markov_decay": (float, 1.5, "singular value decay exponent (spectral)"),
    "markov_concentration": (float, 0.1, "Dirichlet concentration (dirichlet)"),
    "chain_seed": (int, 7, "seed of the transition table"),
    "data_seed": (int, 1, "sampling seed of the training corpus"),
    "train_tokens": (int, 2000, "student training tokens n"),
    "val_tokens": (int, 16000, "held-out tokens (independent draw from the same chain)"),
    # run
    "seed": (int, 0, "student init and batch sampling seed"),
    "seeds": (str, "0,1,2", "seeds for multi-seed experiments (medians)"),
    "sweep_axis": (str, "rank", "rank | n_samples | lambda | lr"),
    "sweep_grid": (str, "2,4,8,16", "comma-separated grid"),
    "sweep_ranks": (str, "2,3,4,6,8,12,16,24,32", "rank grid nested inside an n_samples sweep"),
    "workers": (int, 1, "parallel processes for sweeps"),
}

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _convert(key: str, raw):
    if key not in SCHEMA:
        raise InvalidInputError(f"unknown config key {key!r}")
    typ = SCHEMA[key][0]
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s not in _BOOL:
            raise InvalidInputError(f"{key}: expected a boolean, got {raw!r}")
        return _BOOL[s]
    try:
        return typ(str(raw).strip()) if typ is not str else str(raw).strip()
    except ValueError:
        raise InvalidInputError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_int_list(text: str) -> list:
    try:
        out = [int(float(x)) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise InvalidInputError(f"cannot parse integer list {text!r}") from None
    return out


def parse_float_list(text: str) -> list:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise InvalidInputError(f"cannot parse number list {text!r}") from None


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {k: spec[1] for k, spec in SCHEMA.items()}
        for k, v in self.values.items():
            full[k] = _convert(k, v)
        self.values = full
        self.validate()

    def __getitem__(self, key):
        return self.values[key]

    def validate(self):
        v = self.values
        if v["lr"] != "auto":
            try:
                if not float(v["lr"]) > 0:
                    raise ValueError
            except ValueError:
                raise InvalidInputError("lr must be a positive number or 'auto'") from None
        if v["teacher_data"] not in ("separate", "shared"):
            raise InvalidInputError("teacher_data must be separate or shared")
        if v["data_source"] not in ("markov", "text"):
            raise InvalidInputError("data_source must be markov or text")
        if v["data_source"] == "text" and not v["text_path"]:
            raise InvalidInputError("data_source=text needs text_path")
        if v["sweep_axis"] not in ("rank", "n_samples", "lambda", "lr"):
            raise InvalidInputError(f"unknown sweep axis {v['sweep_axis']!r}")
        if v["init"] not in ("svd", "random", "identity"):
            raise InvalidInputError(f"unknown init {v['init']!r}")
        if v["workers"] < 1:
            raise InvalidInputError("workers must be >= 1")
        for k in ("steps", "batch_size", "train_tokens", "val_tokens", "teacher_tokens",
                  "teacher_batch_size", "eval_windows"):
            if v[k] < 1:
                raise InvalidInputError(f"{k} must be >= 1")
        if v["teacher_steps"] < 0:
            raise InvalidInputError("teacher_steps must be >= 0")
        self.model_config()  # shape checks

    def replace(self, **changes) -> "RunConfig":
        vals = dict(self.values)
        vals.update(changes)
        return RunConfig(vals)

    # ---- views
    def model_config(self) -> ModelConfig:
        v = self.values
        vocab = 256 if v["data_source"] == "text" else v["vocab_size"]
        return ModelConfig(vocab, v["num_layers"], v["hidden_dim"], v["num_heads"], v["seq_len"], v["ff_mult"])

    def sgd_config(self, seed: int | None = None) -> SgdConfig:
        v = self.values
        lr = "auto" if v["lr"] == "auto" else float(v["lr"])
        return SgdConfig(lr=lr, steps=v["steps"], batch_size=v["batch_size"],
                         seed=v["seed"] if seed is None else seed, lam=v["lambda_clone"],
                         tau=v["tau"], optimizer=v["optimizer"], use_kd=v["use_kd"],
                         use_lm=v["use_lm"], use_clone=v["use_clone"], eval_every=v["eval_every"],
                         weight_decay=v["weight_decay"], schedule=v["schedule"],
                         warmup_frac=v["warmup_frac"])

    def seed_list(self) -> list:
        return parse_int_list(self.values["seeds"])

    # ---- text form
    def serialize(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in sorted(self.values))

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        vals = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"config line {lineno}: expected key=value")
            k, val = (s.strip() for s in line.split("=", 1))
            vals[k] = val
        return cls(vals)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.parse(Path(path).read_text())
        except OSError as exc:
            raise InvalidInputError(f"cannot read config {path}: {exc}") from None

    def with_overrides(self, pairs) -> "RunConfig":
        """Apply ``key=value`` strings (from ``--set``)."""
        vals = dict(self.values)
        for p in pairs or ():
            if "=" not in p:
                raise InvalidInputError(f"--set expects key=value, got {p!r}")
            k, val = (s.strip() for s in p.split("=", 1))
            vals[k] = _convert(k, val)
        return RunConfig(vals)


def describe_defaults() -> str:
    return "".join(f"{k} = {_fmt(spec[1])}    # {spec[2]}\n" for k, spec in SCHEMA.items())
