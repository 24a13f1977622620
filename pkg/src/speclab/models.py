"""Finite-vocabulary autoregressive token models.

Token ids are integers in ``[0, vocab_size)``. A model conditions on the
last ``order`` tokens of the context, left-padding with ``pad_token``
when the context is shorter than the window. Two families share this
duck-typed interface:

* :class:`TabularMarkovModel` holds an explicit conditional probability
  table and acts as the frozen ground-truth generator.
* :class:`LinearSoftmaxDraftModel` holds trainable logits, one row per
  context window, softmaxed on demand.

All sampling goes through ``numpy.random.Generator`` instances supplied
by the caller, so every run is reproducible from its seeds.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

MODEL_FORMAT = "speclab-model/1"

__all__ = [
    "MODEL_FORMAT",
    "TabularMarkovModel",
    "LinearSoftmaxDraftModel",
    "next_distribution",
    "sample_sequence",
    "sequence_log_prob",
    "token_loss",
    "grad_token_loss",
    "save_model",
    "load_model",
]


def _check_vocab_order(vocab_size: int, order: int, pad_token: int):
    if vocab_size < 2:
        raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    if not 0 <= pad_token < vocab_size:
        raise ValueError(f"pad_token {pad_token} outside vocabulary of size {vocab_size}")


def _window_index(vocab_size: int, order: int, pad_token: int, ctx: Sequence[int]) -> int:
    # Encode the last `order` tokens (left-padded) as a base-V integer.
    idx = 0
    n = len(ctx)
    for j in range(n - order, n):
        tok = int(ctx[j]) if j >= 0 else pad_token
        if not 0 <= tok < vocab_size:
            raise ValueError(f"token id {tok} outside vocabulary of size {vocab_size}")
        idx = idx * vocab_size + tok
    return idx


class TabularMarkovModel:
    """Markov model of a fixed order backed by an explicit probability table.

    ``table`` has shape ``(vocab_size ** order, vocab_size)``; row ``i``
    is the next-token distribution for the context window encoded by
    ``window_index``. Rows must be nonnegative and sum to 1 within 1e-9.
    """

    def __init__(self, vocab_size: int, order: int, table, pad_token: int = 0):
        _check_vocab_order(vocab_size, order, pad_token)
        table = np.ascontiguousarray(np.asarray(table, dtype=np.float64))
        expected = (vocab_size**order, vocab_size)
        if table.shape != expected:
            raise ValueError(f"table shape {table.shape} != {expected}")
        if np.any(table < 0.0):
            raise ValueError("table entries must be nonnegative")
        drift = np.abs(table.sum(axis=1) - 1.0)
        if np.any(drift > 1e-9):
            raise ValueError(f"table rows must sum to 1 (max drift {drift.max():.3e})")
        self.vocab_size = int(vocab_size)
        self.order = int(order)
        self.pad_token = int(pad_token)
        self.table = table

    def window_index(self, ctx: Sequence[int]) -> int:
        return _window_index(self.vocab_size, self.order, self.pad_token, ctx)

    def base_distribution(self, ctx: Sequence[int]) -> np.ndarray:
        """Next-token probabilities before any temperature adjustment.

        Returns a view into the table; treat it as read-only.
        """
        return self.table[self.window_index(ctx)]

    def mean_conditional_entropy(self, ctxs: Sequence[Sequence[int]]) -> float:
        """Average entropy of the model's own next-token distributions.

        This is the floor of the cross-entropy objective any drafter can
        reach on those contexts.
        """
        rows = self.table[[self.window_index(c) for c in ctxs]]
        with np.errstate(divide="ignore"):
            logp = np.log(rows)
        terms = np.where(rows > 0.0, rows * logp, 0.0)
        return float(-terms.sum(axis=1).mean())


class LinearSoftmaxDraftModel:
    """Trainable drafter: one logit row per context window, softmaxed on demand."""

    def __init__(self, vocab_size: int, order: int, logits=None, pad_token: int = 0, step: int = 0):
        _check_vocab_order(vocab_size, order, pad_token)
        shape = (vocab_size**order, vocab_size)
        if logits is None:
            logits = np.zeros(shape, dtype=np.float64)
        else:
            logits = np.ascontiguousarray(np.asarray(logits, dtype=np.float64))
            if logits.shape != shape:
                raise ValueError(f"logits shape {logits.shape} != {shape}")
            if not np.all(np.isfinite(logits)):
                raise ValueError("logits must be finite")
        self.vocab_size = int(vocab_size)
        self.order = int(order)
        self.pad_token = int(pad_token)
        self.logits = logits
        self.step = int(step)

    def window_index(self, ctx: Sequence[int]) -> int:
        return _window_index(self.vocab_size, self.order, self.pad_token, ctx)

    def base_distribution(self, ctx: Sequence[int]) -> np.ndarray:
        row = self.logits[self.window_index(ctx)]
        z = row - row.max()
        e = np.exp(z)
        return e / e.sum()

    def copy(self) -> "LinearSoftmaxDraftModel":
        return LinearSoftmaxDraftModel(
            self.vocab_size, self.order, self.logits.copy(), self.pad_token, self.step
        )

    def fingerprint(self) -> str:
        """Hex digest of the parameters, for frozen-model checks."""
        import hashlib

        return hashlib.sha256(self.logits.tobytes()).hexdigest()


def next_distribution(model, ctx: Sequence[int], temp: float = 1.0) -> np.ndarray:
    """Temperature-adjusted next-token distribution.

    ``temp == 0`` returns a one-hot on the argmax token (lowest token id
    wins ties). Any other temperature raises the base probabilities to
    ``1/temp`` and renormalizes; zero-probability tokens stay at zero.
    """
    if temp < 0:
        raise ValueError(f"temperature must be >= 0, got {temp}")
    base = model.base_distribution(ctx)
    if temp == 0:
        out = np.zeros_like(base)
        out[int(np.argmax(base))] = 1.0
        return out
    if temp == 1:
        return np.array(base, copy=True)
    with np.errstate(divide="ignore"):
        logp = np.log(base) / temp
    logp -= logp.max()
    out = np.exp(logp)
    out /= out.sum()
    return out


def sample_sequence(model, ctx: Sequence[int], length: int, temp: float, rng) -> tuple:
    """Autoregressively draw ``length`` tokens at the given temperature.

    At ``temp == 0`` this is the deterministic argmax chain and the rng
    is not consumed.
    """
    if length < 0:
        raise ValueError("length must be >= 0")
    out = []
    cur = tuple(ctx)
    for _ in range(length):
        dist = next_distribution(model, cur, temp)
        if temp == 0:
            tok = int(np.argmax(dist))
        else:
            tok = int(rng.choice(model.vocab_size, p=dist))
        out.append(tok)
        cur += (tok,)
    return tuple(out)


def sequence_log_prob(model, ctx: Sequence[int], seq: Sequence[int], temp: float = 1.0) -> float:
    """Joint log-probability of ``seq`` continuing ``ctx``.

    Returns ``-inf`` as soon as any step has zero probability (at
    ``temp == 0`` that is every step off the argmax chain).
    """
    total = 0.0
    cur = tuple(ctx)
    for tok in seq:
        tok = int(tok)
        if not 0 <= tok < model.vocab_size:
            raise ValueError(f"token id {tok} outside vocabulary of size {model.vocab_size}")
        p = float(next_distribution(model, cur, temp)[tok])
        if p <= 0.0:
            return float("-inf")
        total += math.log(p)
        cur += (tok,)
    return total


def _distribution_rows(model, ctxs) -> np.ndarray:
    # One probability row per context, vectorized for the two known families.
    idx = np.fromiter((model.window_index(c) for c in ctxs), dtype=np.int64, count=len(ctxs))
    table = getattr(model, "table", None)
    if table is not None:
        return table[idx]
    logits = getattr(model, "logits", None)
    if logits is not None:
        rows = logits[idx]
        rows = rows - rows.max(axis=1, keepdims=True)
        np.exp(rows, out=rows)
        rows /= rows.sum(axis=1, keepdims=True)
        return rows
    return np.stack([model.base_distribution(c) for c in ctxs])


def token_loss(draft, target, ctxs: Sequence[Sequence[int]]) -> float:
    """Mean full-vocabulary cross-entropy of the draft against the target.

    Both distributions are taken at temperature 1. The average runs over
    the supplied contexts.
    """
    if len(ctxs) == 0:
        raise ValueError("token_loss needs at least one context")
    if draft.vocab_size != target.vocab_size:
        raise ValueError("draft and target vocabularies differ")
    p_t = _distribution_rows(target, ctxs)
    p_m = _distribution_rows(draft, ctxs)
    with np.errstate(divide="ignore"):
        logq = np.log(p_m)
    terms = np.where(p_t > 0.0, p_t * logq, 0.0)
    return float(-terms.sum(axis=1).mean())


def grad_token_loss(draft, target, ctxs: Sequence[Sequence[int]]) -> np.ndarray:
    """Gradient of :func:`token_loss` with respect to the draft logits.

    Each visited window row accumulates ``(p_draft - p_target) / n_ctxs``;
    untouched rows stay zero.
    """
    if len(ctxs) == 0:
        raise ValueError("grad_token_loss needs at least one context")
    logits = getattr(draft, "logits", None)
    if logits is None:
        raise TypeError("grad_token_loss needs a model with trainable logits")
    idx = np.fromiter((draft.window_index(c) for c in ctxs), dtype=np.int64, count=len(ctxs))
    p_t = _distribution_rows(target, ctxs)
    p_m = _distribution_rows(draft, ctxs)
    grad = np.zeros_like(logits)
    np.add.at(grad, idx, (p_m - p_t) / len(ctxs))
    return grad


def save_model(model, path) -> None:
    """Write a model to a self-describing versioned JSON file.

    Parameters round-trip bit-exactly through :func:`load_model`.
    """
    if isinstance(model, TabularMarkovModel):
        payload = {
            "format": MODEL_FORMAT,
            "kind": "tabular",
            "vocab_size": model.vocab_size,
            "order": model.order,
            "pad_token": model.pad_token,
            "table": model.table.tolist(),
        }
    elif isinstance(model, LinearSoftmaxDraftModel):
        payload = {
            "format": MODEL_FORMAT,
            "kind": "linear_softmax",
            "vocab_size": model.vocab_size,
            "order": model.order,
            "pad_token": model.pad_token,
            "step": model.step,
            "logits": model.logits.tolist(),
        }
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_model(path):
    """Load a model written by :func:`save_model`."""
    payload = json.loads(Path(path).read_text())
    fmt = payload.get("format")
    if fmt != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {fmt!r} (expected {MODEL_FORMAT!r})")
    kind = payload.get("kind")
    if kind == "tabular":
        return TabularMarkovModel(
            payload["vocab_size"], payload["order"], payload["table"], payload["pad_token"]
        )
    if kind == "linear_softmax":
        return LinearSoftmaxDraftModel(
            payload["vocab_size"],
            payload["order"],
            payload["logits"],
            payload["pad_token"],
            payload.get("step", 0),
        )
    raise ValueError(f"unknown model kind {kind!r}")
