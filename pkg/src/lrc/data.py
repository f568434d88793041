"""Synthetic Markov corpora, byte-level text ingestion and batch sampling."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import kernels
from .errors import InvalidInputError
from .matcore import RngState

CACHE_MAGIC = b"LRCD"
HELDOUT_FRACTION = 0.1


@dataclass
class Corpus:
    tokens: np.ndarray
    vocab_size: int
    provenance: str

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise InvalidInputError("corpus tokens must be 1-D")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size):
            raise InvalidInputError("token id outside vocabulary")

    def __len__(self):
        return int(self.tokens.size)

    def split(self, heldout_fraction: float = HELDOUT_FRACTION):
        """(train, held-out) with the held-out part taken from the end."""
        cut = len(self) - int(round(len(self) * heldout_fraction))
        return (Corpus(self.tokens[:cut], self.vocab_size, self.provenance + ":train"),
                Corpus(self.tokens[cut:], self.vocab_size, self.provenance + ":heldout"))

    def head(self, n: int) -> "Corpus":
        return Corpus(self.tokens[:n], self.vocab_size, f"{self.provenance}:head{n}")


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray


def markov_transitions(chain_seed: int, order: int, vocab_size: int,
                       concentration: float = 0.1, kind: str = "dirichlet",
                       decay: float = 1.0, scale: float = 8.0) -> np.ndarray:
    """Row-stochastic table with ``vocab_size**order`` rows.

    ``kind="dirichlet"`` draws each row from a symmetric Dirichlet with the
    given concentration. ``kind="spectral"`` builds a logit matrix
    ``scale * U diag(i**-decay) V^T`` from random orthonormal U, V and applies
    a row softmax, so the log-transition table has a power-law spectrum.
    """
    if order not in (1, 2):
        raise InvalidInputError("Markov order must be 1 or 2")
    if vocab_size < 2:
        raise InvalidInputError("vocab_size must be >= 2")
    g = RngState(chain_seed, 0).generator()
    rows = vocab_size ** order
    if kind == "spectral":
        k = min(rows, vocab_size)
        u, _ = np.linalg.qr(g.standard_normal((rows, k)))
        v, _ = np.linalg.qr(g.standard_normal((vocab_size, k)))
        sv = scale * np.arange(1, k + 1, dtype=np.float64) ** (-decay)
        # rows of u have norm ~ sqrt(k / rows); rescale so logits are O(scale)
        z = (u * sv) @ v.T * np.sqrt(rows)
        z -= z.max(axis=1, keepdims=True)
        table = np.exp(z)
        return table / table.sum(axis=1, keepdims=True)
    if kind != "dirichlet":
        raise InvalidInputError(f"unknown transition kind {kind!r}")
    table = g.dirichlet(np.full(vocab_size, concentration), size=rows)
    # guard against rows that underflowed to all zeros at tiny concentrations
    bad = ~np.isfinite(table).all(axis=1) | (table.sum(axis=1) <= 0)
    if bad.any():
        table[bad] = 1.0 / vocab_size
    return table / table.sum(axis=1, keepdims=True)


def generate_markov_corpus(seed: int, order: int, vocab_size: int, length: int,
                           concentration: float = 0.1, chain_seed: int | None = None,
                           transitions: np.ndarray | None = None, kind: str = "dirichlet",
                           decay: float = 1.0, scale: float = 8.0) -> Corpus:
    """Sample ``length`` tokens from a seeded random Markov chain.

    The transition table comes from ``chain_seed`` (default: ``seed``) unless an
    explicit ``transitions`` table is supplied; ``seed`` drives the sampling
    path. Two corpora with the same chain seed but different sampling seeds are
    independent draws from the same source.
    """
    if order not in (1, 2):
        raise InvalidInputError("Markov order must be 1 or 2")
    if vocab_size < 2:
        raise InvalidInputError("vocab_size must be >= 2")
    if length < order + 1:
        raise InvalidInputError("length too short for the chain order")
    chain_seed = seed if chain_seed is None else chain_seed
    if transitions is None:
        transitions = markov_transitions(chain_seed, order, vocab_size, concentration,
                                         kind=kind, decay=decay, scale=scale)
        if kind == "spectral":
            tag = (f"markov(order={order},vocab={vocab_size},spectral,decay={decay},scale={scale},"
                   f"chain={chain_seed},seed={seed})")
        else:
            tag = f"markov(order={order},vocab={vocab_size},conc={concentration},chain={chain_seed},seed={seed})"
    else:
        transitions = np.asarray(transitions, dtype=np.float64)
        if transitions.shape != (vocab_size ** order, vocab_size):
            raise InvalidInputError("transition table has the wrong shape")
        tag = f"markov(order={order},vocab={vocab_size},custom,seed={seed})"
    cum = np.cumsum(transitions, axis=1)
    cum[:, -1] = 1.0
    rng = RngState(seed, 1)
    start = rng.integers(0, vocab_size, order).astype(np.int64)
    uniforms = rng.uniform(length)
    toks = kernels.markov_sample(np.ascontiguousarray(cum), uniforms, start, order, vocab_size)
    return Corpus(toks, vocab_size, tag + f",len={length}")


def char_tokenize(text) -> Corpus:
    """Byte-level tokens (vocabulary 256)."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    data = bytes(text)
    if not data:
        raise InvalidInputError("cannot tokenize empty input")
    digest = hashlib.sha256(data).hexdigest()[:16]
    return Corpus(np.frombuffer(data, dtype=np.uint8).astype(np.int64), 256, f"bytes:sha256={digest}")


def detokenize(corpus_or_ids) -> bytes:
    ids = corpus_or_ids.tokens if isinstance(corpus_or_ids, Corpus) else np.asarray(corpus_or_ids)
    return np.asarray(ids, dtype=np.uint8).tobytes()


def load_text(path) -> Corpus:
    path = Path(path)
    corpus = char_tokenize(path.read_bytes())
    corpus.provenance = f"file:{path.name}:{corpus.provenance}"
    return corpus


def sample_batch(corpus: Corpus, batch_size: int, seq_len: int, rng: RngState) -> Batch:
    n = len(corpus)
    if n < seq_len + 1:
        raise InvalidInputError(f"corpus of {n} tokens is shorter than seq_len + 1 = {seq_len + 1}")
    starts = rng.integers(0, n - seq_len, batch_size)
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    block = corpus.tokens[idx]
    return Batch(inputs=block[:, :-1], targets=block[:, 1:])


def batches(corpus: Corpus, batch_size: int, seq_len: int, rng: RngState) -> Iterator[Batch]:
    """Endless stream of uniformly placed next-token batches."""
    if len(corpus) < seq_len + 1:
        raise InvalidInputError(f"corpus of {len(corpus)} tokens is shorter than seq_len + 1")
    while True:
        yield sample_batch(corpus, batch_size, seq_len, rng)


def sequential_batches(corpus: Corpus, batch_size: int, seq_len: int,
                       max_windows: int | None = None) -> list:
    """Non-overlapping windows covering the corpus, for evaluation."""
    n_win = (len(corpus) - 1) // seq_len
    if n_win < 1:
        raise InvalidInputError("corpus too short for a single evaluation window")
    if max_windows is not None:
        n_win = min(n_win, max_windows)
    out = []
    for start in range(0, n_win, batch_size):
        w = np.arange(start, min(start + batch_size, n_win)) * seq_len
        idx = w[:, None] + np.arange(seq_len + 1)[None, :]
        block = corpus.tokens[idx]
        out.append(Batch(inputs=block[:, :-1], targets=block[:, 1:]))
    return out


def save_corpus(corpus: Corpus, path) -> None:
    ids = corpus.tokens
    if ids.size and ids.max() >= 2 ** 31:
        raise InvalidInputError("token ids do not fit in 32 bits")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<QQ", corpus.vocab_size, ids.size))
        fh.write(ids.astype("<i4").tobytes())


def load_corpus(path) -> Corpus:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise InvalidInputError(f"{path} is not a corpus cache file")
    vocab, length = struct.unpack_from("<QQ", raw, 4)
    ids = np.frombuffer(raw, dtype="<i4", count=length, offset=20).astype(np.int64)
    return Corpus(ids, int(vocab), f"cache:{Path(path).name}")
