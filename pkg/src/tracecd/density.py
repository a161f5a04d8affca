"""Autoregressive density backends and fidelity metrics.

Discovery only talks to a backend through ``next_token_probs``: given a batch
of token rows and, per row, the positions of interest, return the next-token
distribution after each of those positions.  ``eval_batch`` is the full-prefix
convenience form of the same call.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .scm import (PROB_FLOOR, ParameterError, InputError, ScmParams, Sequence,
                  kernel_probs, kl_divergence, lag_logits, softmax, sample_dataset,
                  conditional_entropies)


class TrainingError(RuntimeError):
    """Loss became non-finite; ``last_good`` holds the last stable snapshot."""

    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


class DensityBackend:
    vocab_size: int

    def next_token_probs(self, tokens: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """(B, T) tokens, (B, P) positions -> (B, P, V) next-token distributions."""
        raise NotImplementedError

    def eval_batch(self, tokens, lengths=None) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        B, T = tokens.shape
        pos = np.broadcast_to(np.arange(T), (B, T))
        out = self.next_token_probs(tokens, pos)
        if lengths is not None:
            invalid = np.arange(T)[None, :] >= np.asarray(lengths)[:, None]
            out[invalid] = 1.0 / self.vocab_size
        return out


class _LagKernel(DensityBackend):
    """Shared evaluation for models with bias + decayed lag matrices."""

    bias: np.ndarray
    weights: np.ndarray
    decay: np.ndarray

    @property
    def vocab_size(self):
        return self.bias.shape[0]

    @property
    def memory(self):
        return self.weights.shape[0]

    def next_token_probs(self, tokens, positions):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise InputError("token out of range for this backend")
        return kernel_probs(self.bias, self.weights, self.decay, tokens, np.asarray(positions))


class ExactBackend(_LagKernel):
    """The SCM's own kernel, i.e. an oracle with zero KL gap."""

    def __init__(self, scm: ScmParams):
        self.scm = scm
        self.bias = scm.bias
        self.weights = scm.lag_weights
        self.decay = scm.decay


def exact_backend(scm: ScmParams) -> ExactBackend:
    return ExactBackend(scm)


@dataclass
class TrainHyper:
    learning_rate: float = 2.0
    batch_size: int = 32
    epochs: int = 50
    l1: float = 0.0
    seed: int = 0


@dataclass(eq=False)
class LogLinearModel(_LagKernel):
    bias: np.ndarray
    weights: np.ndarray
    decay: np.ndarray
    hyper: TrainHyper = field(default_factory=TrainHyper)
    step: int = 0

    @classmethod
    def zeros(cls, vocab_size, memory, decay, hyper=None):
        decay = np.asarray(decay, dtype=np.float64)
        if decay.shape != (memory,):
            raise ParameterError("decay must have one entry per lag")
        return cls(np.zeros(vocab_size), np.zeros((memory, vocab_size, vocab_size)), decay,
                   hyper or TrainHyper())

    def snapshot(self) -> "LogLinearModel":
        return LogLinearModel(self.bias.copy(), self.weights.copy(), self.decay.copy(),
                              copy.copy(self.hyper), self.step)

    # -- objective -----------------------------------------------------------

    def loss_and_grad(self, tokens: np.ndarray, with_grad=True):
        """Mean next-token cross-entropy (nats) over every position of (B, L) tokens."""
        B, L = tokens.shape
        pos = np.broadcast_to(np.arange(-1, L - 1), (B, L))
        logits = lag_logits(self.bias, self.weights, self.decay, tokens, pos)
        z = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(z).sum(axis=-1))
        n = B * L
        picked = np.take_along_axis(z, tokens[..., None], axis=-1)[..., 0]
        loss = float((logz - picked).sum() / n)
        if not with_grad:
            return loss, None, None
        g = np.exp(z - logz[..., None])
        np.put_along_axis(g, tokens[..., None],
                          np.take_along_axis(g, tokens[..., None], axis=-1) - 1.0, axis=-1)
        g /= n
        gb = g.sum(axis=(0, 1))
        gW = np.zeros_like(self.weights)
        for k in range(self.memory):
            src = np.arange(L) - 1 - k
            ok = src >= 0
            if not ok.any():
                continue
            prev = tokens[:, src[ok]].reshape(-1)
            gk = g[:, ok].reshape(-1, g.shape[-1]) * self.decay[k]
            np.add.at(gW[k], prev, gk)
        return loss, gb, gW

    def loss(self, sequences) -> float:
        return self.loss_and_grad(_as_array(sequences), with_grad=False)[0]


def _as_array(sequences) -> np.ndarray:
    if isinstance(sequences, np.ndarray):
        return sequences.astype(np.int64)
    rows = [s.tokens if isinstance(s, Sequence) else np.asarray(s) for s in sequences]
    if len({len(r) for r in rows}) != 1:
        raise InputError("training sequences must share one length")
    return np.stack(rows).astype(np.int64)


def train_loglinear(dataset, vocab_size: int, memory: int, decay, hyper: TrainHyper = None,
                    checkpoints=(0,), val=None, on_epoch=None) -> list[tuple[LogLinearModel, float]]:
    """Plain mini-batch SGD on the mean per-token cross-entropy.

    ``checkpoints`` are counts of SGD steps; a snapshot and its loss (on
    ``val`` if given, else on the training data) is returned for each.
    Steps beyond ``hyper.epochs`` worth of data are not taken.
    """
    hyper = hyper or TrainHyper()
    data = _as_array(dataset)
    if data.size == 0:
        raise ParameterError("empty training set")
    if data.min() < 0 or data.max() >= vocab_size:
        raise InputError("training token out of range")
    val_arr = _as_array(val) if val is not None else data
    model = LogLinearModel.zeros(vocab_size, memory, decay, hyper)
    wanted = sorted(set(int(c) for c in checkpoints))
    out = {}
    rng = np.random.default_rng(hyper.seed)
    n = data.shape[0]
    bs = max(1, min(hyper.batch_size, n))
    last_good = model.snapshot()

    def record():
        if model.step in wanted and model.step not in out:
            out[model.step] = (model.snapshot(), model.loss(val_arr))

    record()
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            if model.step >= wanted[-1]:
                break
            batch = data[order[start:start + bs]]
            loss, gb, gW = model.loss_and_grad(batch)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at step {model.step}", last_good)
            model.bias -= hyper.learning_rate * gb
            model.weights -= hyper.learning_rate * gW
            if hyper.l1 > 0:
                shrink = hyper.learning_rate * hyper.l1
                model.weights = np.sign(model.weights) * np.maximum(np.abs(model.weights) - shrink, 0.0)
            model.step += 1
            if not (np.isfinite(model.bias).all() and np.isfinite(model.weights).all()):
                raise TrainingError(f"parameters diverged at step {model.step}", last_good)
            record()
            if model.step in out:
                last_good = out[model.step][0]
        if on_epoch is not None:
            on_epoch(epoch, model)
        if model.step >= wanted[-1]:
            break
    return [out[s] for s in wanted if s in out]


# --------------------------------------------------------------------------
# fidelity


@dataclass
class OracleScore:
    loss: float
    entropy_floor: float
    h_max: float
    score: float
    eps: float
    tv_bound: float

    @property
    def tv_violation(self) -> bool:
        return self.tv_bound > 0.5


def negative_log_likelihood(model: DensityBackend, sequences) -> float:
    data = _as_array(sequences)
    B, L = data.shape
    pos = np.broadcast_to(np.arange(-1, L - 1), (B, L))
    p = model.next_token_probs(data, pos)
    picked = np.take_along_axis(p, data[..., None], axis=-1)[..., 0]
    return float(-np.log(np.clip(picked, PROB_FLOOR, 1.0)).mean())


def oracle_score(model: DensityBackend, val, entropy_floor: float) -> OracleScore:
    """Normalised excess cross-entropy of ``model`` over the process entropy."""
    h_max = math.log(model.vocab_size)
    if entropy_floor >= h_max:
        raise ParameterError("entropy floor must be below ln|X|")
    loss = negative_log_likelihood(model, val)
    eps = loss - entropy_floor
    return OracleScore(loss, entropy_floor, h_max, eps / (h_max - entropy_floor), eps,
                       math.sqrt(max(eps, 0.0) / 2.0))


def min_validation_floor(losses) -> float:
    """Entropy floor for an unknown process: the smallest validation loss seen."""
    return float(np.min(losses))


def entropy_floor(scm: ScmParams, val) -> tuple[float, float]:
    """Mean true conditional entropy on the validation tokens, with its standard error."""
    data = _as_array(val)
    per_seq = conditional_entropies(scm, data).mean(axis=1)
    se = per_seq.std(ddof=1) / np.sqrt(len(per_seq)) if len(per_seq) > 1 else 0.0
    return float(per_seq.mean()), float(se)


def kl_gap(model: DensityBackend, scm: ScmParams, n_histories: int = 200, horizon: int = 32,
           seed: int = 0) -> tuple[float, float]:
    """Mean KL(true kernel || model) over sampled histories; returns (mean, stderr)."""
    if model.vocab_size != scm.vocab_size:
        raise InputError("model and SCM vocabularies differ")
    data = np.stack([s.tokens for s in sample_dataset(scm, n_histories, horizon, seed)])
    B, L = data.shape
    pos = np.broadcast_to(np.arange(-1, L - 1), (B, L))
    p = kernel_probs(scm.bias, scm.lag_weights, scm.decay, data, pos)
    q = model.next_token_probs(data, pos)
    per_seq = kl_divergence(p, q).mean(axis=1)
    se = per_seq.std(ddof=1) / np.sqrt(B) if B > 1 else 0.0
    return float(per_seq.mean()), float(se)


# --------------------------------------------------------------------------
# checkpoint files: 8-byte little-endian header length, JSON header, float64 block


def save_checkpoint(model: LogLinearModel, path, seed: int = 0) -> None:
    header = {"format": "tracecd-loglinear", "vocab_size": model.vocab_size,
              "memory": model.memory, "decay": model.decay.tolist(), "seed": int(seed),
              "step": int(model.step)}
    hb = json.dumps(header, sort_keys=True).encode()
    block = np.concatenate([model.bias, model.weights.ravel()]).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(block)


def load_checkpoint(path) -> LogLinearModel:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    V, m = int(header["vocab_size"]), int(header["memory"])
    params = np.frombuffer(raw[8 + n:], dtype="<f8")
    if params.size != V + m * V * V:
        raise InputError(f"checkpoint holds {params.size} parameters, header implies {V + m * V * V}")
    model = LogLinearModel(params[:V].astype(np.float64), params[V:].reshape(m, V, V).astype(np.float64),
                           np.asarray(header["decay"], dtype=np.float64))
    model.step = int(header["step"])
    return model
