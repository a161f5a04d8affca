"""Linear structural causal models over discrete event sequences.

The generative kernel is an additive softmax mechanism: the next-token logits
are a bias plus, for each lag ``k``, the row of ``W[k]`` selected by the token
``k`` steps back, scaled by a per-lag decay.  This module samples sequences
from such a kernel, measures how predictable it is, and derives the
interventional ground-truth instance graph used for evaluation.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graphs import InstanceGraph

FORMAT_VERSION = 1
PROB_FLOOR = 1e-9


class ParameterError(ValueError):
    """Invalid model or experiment parameters."""


class InputError(ValueError):
    """Data that does not match the model it is used with."""


@dataclass
class ScmParams:
    vocab_size: int
    memory: int
    bias: np.ndarray  # (V,)
    lag_weights: np.ndarray  # (m, V, V); row = past token, column = next-token logit
    decay: np.ndarray  # (m,)
    sparsity: float = 1.0
    weight_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        self.lag_weights = np.ascontiguousarray(self.lag_weights, dtype=np.float64)
        self.decay = np.ascontiguousarray(self.decay, dtype=np.float64)
        V, m = self.vocab_size, self.memory
        if self.bias.shape != (V,) or self.lag_weights.shape != (m, V, V) or self.decay.shape != (m,):
            raise ParameterError("ScmParams shapes do not match vocab_size/memory")

    def transition_dist(self, history) -> np.ndarray:
        return transition_dist(self, history)

    def to_dict(self) -> dict:
        lags = []
        for W in self.lag_weights:
            rows, cols = np.nonzero(W)
            lags.append({"rows": rows.tolist(), "cols": cols.tolist(),
                         "vals": W[rows, cols].tolist()})
        return {
            "format_version": FORMAT_VERSION,
            "vocab_size": self.vocab_size,
            "memory": self.memory,
            "bias": self.bias.tolist(),
            "lags": lags,
            "decay": self.decay.tolist(),
            "sparsity": self.sparsity,
            "weight_scale": self.weight_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScmParams":
        if d.get("format_version") != FORMAT_VERSION:
            raise ParameterError(f"unsupported SCM format_version {d.get('format_version')!r}")
        V, m = int(d["vocab_size"]), int(d["memory"])
        W = np.zeros((m, V, V))
        if len(d["lags"]) != m:
            raise ParameterError("number of lag matrices does not match memory")
        for k, lag in enumerate(d["lags"]):
            W[k, lag["rows"], lag["cols"]] = lag["vals"]
        return cls(V, m, np.asarray(d["bias"]), W, np.asarray(d["decay"]),
                   sparsity=float(d["sparsity"]), weight_scale=float(d["weight_scale"]),
                   seed=int(d["seed"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class Sequence:
    tokens: np.ndarray
    seed: int = 0
    scm_id: Optional[str] = None

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1 or len(self.tokens) < 1:
            raise InputError("a sequence needs at least one token")

    def __len__(self):
        return len(self.tokens)

    def to_dict(self) -> dict:
        return {"tokens": self.tokens.tolist(), "seed": int(self.seed), "scm_id": self.scm_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Sequence":
        return cls(np.asarray(d["tokens"], dtype=np.int64), int(d.get("seed", 0)), d.get("scm_id"))


@dataclass
class GroundTruthConfig:
    n_counterfactuals: int = 10
    edge_threshold: float = 0.05
    rollout_particles: int = 64
    exact_max_gap: int = 2
    # KL on the observed-token event rather than the full next-token distribution
    binary_event: bool = True
    # "uniform": mediators re-randomized (direct effect); "kernel": ancestral rollouts (total effect)
    mediators: str = "uniform"
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_counterfactuals < 1:
            raise ParameterError("n_counterfactuals must be >= 1")
        if not self.edge_threshold > 0:
            raise ParameterError("edge_threshold must be > 0")
        if self.rollout_particles < 1:
            raise ParameterError("rollout_particles must be >= 1")
        if self.mediators not in ("uniform", "kernel"):
            raise ParameterError(f"unknown mediator mode {self.mediators!r}")


@dataclass
class PerturbationConfig:
    noise_prob: float = 0.0
    drop_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for p in (self.noise_prob, self.drop_prob):
            if not 0.0 <= p <= 1.0:
                raise ParameterError("perturbation probabilities must lie in [0, 1]")
        if self.noise_prob > 0 and self.drop_prob > 0:
            raise ParameterError("use either noise or drops in one perturbation arm, not both")


@dataclass
class PredictabilityEstimate:
    score: float
    stderr: float
    entropy: float  # nats/token

    def __float__(self):
        return self.score


# --------------------------------------------------------------------------
# kernel arithmetic shared with the density backends


def lag_logits(bias, weights, decay, tokens, positions):
    """Next-token logits after each requested position.

    ``tokens`` is (B, T); ``positions`` is (B, P) and may contain -1 for the
    empty history.  The result at ``[b, p]`` is the logit vector for the token
    that follows ``tokens[b, :positions[b, p] + 1]``.  Lags reaching before
    the start of the row are skipped rather than padded.
    """
    tokens = np.asarray(tokens)
    positions = np.asarray(positions)
    B, P = positions.shape
    V = bias.shape[0]
    logits = np.empty((B, P, V))
    logits[...] = bias
    for k in range(weights.shape[0]):
        src = positions - k
        valid = src >= 0
        tok = np.take_along_axis(tokens, np.where(valid, src, 0), axis=1)
        contrib = weights[k][tok] * decay[k]
        contrib[~valid] = 0.0
        logits += contrib
    return logits


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kernel_probs(bias, weights, decay, tokens, positions):
    return softmax(lag_logits(bias, weights, decay, tokens, positions))


def _check_tokens(tokens, V):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise InputError(f"token out of range for vocabulary of size {V}")
    return tokens


def transition_dist(scm: ScmParams, history) -> np.ndarray:
    """P(X_t | history) for the SCM; an empty history gives softmax(bias)."""
    hist = _check_tokens(history, scm.vocab_size).reshape(1, -1)
    if hist.shape[1] == 0:
        hist = np.zeros((1, 1), dtype=np.int64)
        pos = np.array([[-1]])
    else:
        pos = np.array([[hist.shape[1] - 1]])
    return kernel_probs(scm.bias, scm.lag_weights, scm.decay, hist, pos)[0, 0]


def entropy(p, axis=-1):
    p = np.clip(p, PROB_FLOOR, 1.0)
    return -(p * np.log(p)).sum(axis=axis)


def kl_divergence(p, q, axis=-1):
    """KL(p || q) in nats with the probability floor applied to both sides."""
    p = np.clip(p, PROB_FLOOR, 1.0)
    q = np.clip(q, PROB_FLOOR, 1.0)
    return (p * (np.log(p) - np.log(q))).sum(axis=axis)


def binary_kl(a, b):
    """KL(Bern(a) || Bern(b)) in nats, both clamped to [eta, 1 - eta]."""
    a = np.clip(a, PROB_FLOOR, 1.0 - PROB_FLOOR)
    b = np.clip(b, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return a * np.log(a / b) + (1.0 - a) * np.log((1.0 - a) / (1.0 - b))


# --------------------------------------------------------------------------
# generation


def generate_scm(vocab_size: int, memory: int, sparsity: float, decay_rate: float = 1.0,
                 seed: int = 0, weight_scale: float = 1.0, bias_scale: float = 0.0) -> ScmParams:
    """Draw a random linear SCM.

    Each lag matrix has exactly ``round(sparsity * V**2)`` nonzero entries
    (at least one), drawn uniform on ``[-weight_scale, weight_scale]`` so both
    excitation and inhibition occur.  The decay is ``decay_rate ** (k - 1)``.
    """
    if vocab_size < 2 or memory < 1:
        raise ParameterError("need vocab_size >= 2 and memory >= 1")
    if not 0.0 < sparsity <= 1.0:
        raise ParameterError("sparsity must lie in (0, 1]")
    if not 0.0 < decay_rate <= 1.0:
        raise ParameterError("decay_rate must lie in (0, 1]")
    if weight_scale < 0 or bias_scale < 0:
        raise ParameterError("scales must be non-negative")
    V = vocab_size
    rng = np.random.default_rng(seed)
    bias = rng.normal(0.0, 1.0, size=V) * bias_scale
    n_nonzero = max(1, int(round(sparsity * V * V)))
    W = np.zeros((memory, V, V))
    for k in range(memory):
        idx = rng.choice(V * V, size=n_nonzero, replace=False)
        W[k].flat[idx] = rng.uniform(-1.0, 1.0, size=n_nonzero) * weight_scale
    decay = decay_rate ** np.arange(memory, dtype=np.float64)
    return ScmParams(V, memory, bias, W, decay, sparsity=float(sparsity),
                     weight_scale=float(weight_scale), seed=int(seed))


def _uniforms(seed, length):
    return np.random.default_rng(seed).random(length)


def _ancestral(bias, weights, decay, uniforms):
    """Vectorised inverse-CDF ancestral sampling; ``uniforms`` is (B, L)."""
    B, L = uniforms.shape
    tokens = np.zeros((B, L), dtype=np.int64)
    for t in range(L):
        pos = np.full((B, 1), t - 1)
        p = kernel_probs(bias, weights, decay, tokens, pos)[:, 0]
        cdf = np.cumsum(p, axis=1)
        u = uniforms[:, t:t + 1] * cdf[:, -1:]
        tokens[:, t] = np.minimum((cdf <= u).sum(axis=1), p.shape[1] - 1)
    return tokens


def sample_sequence(scm: ScmParams, length: int, seed: int) -> Sequence:
    if length < 1:
        raise ParameterError("sequence length must be >= 1")
    u = _uniforms(seed, length)[None]
    tokens = _ancestral(scm.bias, scm.lag_weights, scm.decay, u)[0]
    return Sequence(tokens, seed=int(seed), scm_id=scm.fingerprint)


def sequence_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for s in ss.spawn(n)]


def sample_dataset(scm: ScmParams, n: int, length: int, seed: int) -> list[Sequence]:
    """``n`` sequences, each reproducible on its own through its stored seed."""
    seeds = sequence_seeds(seed, n)
    u = np.stack([_uniforms(s, length) for s in seeds]) if n else np.zeros((0, length))
    tokens = _ancestral(scm.bias, scm.lag_weights, scm.decay, u)
    fp = scm.fingerprint
    return [Sequence(t, seed=s, scm_id=fp) for t, s in zip(tokens, seeds)]


def conditional_entropies(scm: ScmParams, tokens: np.ndarray) -> np.ndarray:
    """Entropy of the true kernel at every position of a (B, L) token array."""
    B, L = tokens.shape
    pos = np.broadcast_to(np.arange(-1, L - 1), (B, L))
    return entropy(kernel_probs(scm.bias, scm.lag_weights, scm.decay, tokens, pos))


def estimate_predictability(scm: ScmParams, n_histories: int = 200, horizon: int = 32,
                            seed: int = 0) -> PredictabilityEstimate:
    """Mean conditional entropy of the kernel over sampled histories, divided by ln|X|."""
    if n_histories < 1 or horizon < 1:
        raise ParameterError("n_histories and horizon must be >= 1")
    u = np.random.default_rng(seed).random((n_histories, horizon))
    tokens = _ancestral(scm.bias, scm.lag_weights, scm.decay, u)
    per_seq = conditional_entropies(scm, tokens).mean(axis=1)
    h = float(per_seq.mean())
    se = float(per_seq.std(ddof=1) / np.sqrt(n_histories)) if n_histories > 1 else 0.0
    hmax = np.log(scm.vocab_size)
    return PredictabilityEstimate(h / hmax, se / hmax, h)


def calibrate_weight_scale(vocab_size, memory, sparsity, decay_rate, target_pred, seed=0,
                           bias_scale=0.0, n_histories=200, horizon=32, iters=30,
                           hi=64.0) -> ScmParams:
    """Bisect ``weight_scale`` so the generated SCM has predictability ``target_pred``."""
    if not 0.0 < target_pred < 1.0:
        raise ParameterError("target_pred must lie in (0, 1)")

    def pred(w):
        s = generate_scm(vocab_size, memory, sparsity, decay_rate, seed, w, bias_scale)
        return estimate_predictability(s, n_histories, horizon, seed).score

    lo = 0.0
    if pred(hi) > target_pred:
        raise ParameterError("target predictability not reachable at this sparsity")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if pred(mid) > target_pred:
            lo = mid
        else:
            hi = mid
    return generate_scm(vocab_size, memory, sparsity, decay_rate, seed, 0.5 * (lo + hi), bias_scale)


# --------------------------------------------------------------------------
# interventional ground truth


def _pair_rng(seed, j, i):
    return np.random.default_rng([seed, j, i])


def _arm_distribution(scm, prefix, cause_values, gap, cfg, rng):
    """Distribution of X_i for each candidate value of X_j.

    ``prefix`` is x_{<j}.  Returns (len(cause_values), V).  Mediator draws are
    common across the candidate values.
    """
    V = scm.vocab_size
    j = len(prefix)
    A = len(cause_values)
    n_med = gap - 1
    if n_med == 0:
        med = np.zeros((1, 0), dtype=np.int64)
    elif cfg.mediators == "uniform" and gap <= cfg.exact_max_gap:
        med = np.stack(np.meshgrid(*[np.arange(V)] * n_med, indexing="ij"), -1).reshape(-1, n_med)
    elif cfg.mediators == "uniform":
        med = rng.integers(0, V, size=(cfg.rollout_particles, n_med))
    else:
        med = None
    if med is not None:
        K = med.shape[0]
        rows = np.empty((A, K, j + gap), dtype=np.int64)
        rows[:, :, :j] = prefix
        rows[:, :, j] = np.asarray(cause_values)[:, None]
        rows[:, :, j + 1:] = med[None]
        rows = rows.reshape(A * K, j + gap)
        pos = np.full((A * K, 1), j + gap - 1)
        p = kernel_probs(scm.bias, scm.lag_weights, scm.decay, rows, pos)[:, 0]
        return p.reshape(A, K, V).mean(axis=1)
    # ancestral rollouts through the true kernel, common uniforms across arms
    K = cfg.rollout_particles
    u = rng.random((K, n_med))
    rows = np.empty((A * K, j + gap), dtype=np.int64)
    rows[:, :j] = prefix
    rows[:, j] = np.repeat(np.asarray(cause_values), K)
    uu = np.tile(u, (A, 1))
    for q in range(n_med):
        pos = np.full((A * K, 1), j + q)
        p = kernel_probs(scm.bias, scm.lag_weights, scm.decay, rows, pos)[:, 0]
        cdf = np.cumsum(p, axis=1)
        rows[:, j + 1 + q] = np.minimum((cdf <= uu[:, q:q + 1] * cdf[:, -1:]).sum(axis=1), V - 1)
    pos = np.full((A * K, 1), j + gap - 1)
    p = kernel_probs(scm.bias, scm.lag_weights, scm.decay, rows, pos)[:, 0]
    return p.reshape(A, K, V).mean(axis=1)


def interventional_effect(scm: ScmParams, tokens, j: int, i: int, cfg: GroundTruthConfig) -> float:
    """Average KL between intervened and observational distributions of X_i."""
    rng = _pair_rng(cfg.seed, j, i)
    cf = rng.integers(0, scm.vocab_size, size=cfg.n_counterfactuals)
    values = np.concatenate([[tokens[j]], cf])
    dist = _arm_distribution(scm, tokens[:j], values, i - j, cfg, rng)
    obs, interv = dist[0], dist[1:]
    if cfg.binary_event:
        kl = binary_kl(interv[:, tokens[i]], obs[tokens[i]])
    else:
        kl = kl_divergence(interv, obs[None])
    return float(kl.mean())


def ground_truth_instance_graph(scm: ScmParams, seq: Sequence, cfg: GroundTruthConfig,
                                context: int) -> InstanceGraph:
    """Interventional instance graph over all pairs ``context <= j < i < L``."""
    tokens = _check_tokens(seq.tokens, scm.vocab_size)
    if seq.scm_id is not None and seq.scm_id != scm.fingerprint:
        raise InputError("sequence was not generated by this SCM")
    L = len(tokens)
    if not 0 <= context < L:
        raise ParameterError("context must satisfy 0 <= c < L")
    pairs = [(j, i) for j in range(context, L) for i in range(j + 1, L)]

    def run(pair):
        return interventional_effect(scm, tokens, pair[0], pair[1], cfg)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            effects = list(ex.map(run, pairs))
    else:
        effects = [run(p) for p in pairs]
    weights = np.zeros((L, L))
    mask = np.zeros((L, L), dtype=bool)
    for (j, i), w in zip(pairs, effects):
        weights[j, i] = w
        mask[j, i] = True
    return InstanceGraph.from_scores(tokens, weights, mask, cfg.edge_threshold,
                                     config={"ground_truth": cfg.__dict__ | {"context": context}})


# --------------------------------------------------------------------------
# perturbations


def perturb_sequence(seq: Sequence, cfg: PerturbationConfig, vocab_size: int) -> Sequence:
    """Inject uniform token noise or delete time steps (indices re-compacted)."""
    rng = np.random.default_rng(cfg.seed)
    tokens = seq.tokens.copy()
    L = len(tokens)
    if cfg.noise_prob > 0:
        hit = rng.random(L) < cfg.noise_prob
        tokens[hit] = rng.integers(0, vocab_size, size=int(hit.sum()))
        return Sequence(tokens, seed=seq.seed, scm_id=seq.scm_id)
    if cfg.drop_prob > 0:
        keep = rng.random(L) >= cfg.drop_prob
        if not keep.any():
            raise ParameterError("every time step was dropped; nothing left to analyse")
        return Sequence(tokens[keep], seed=seq.seed, scm_id=seq.scm_id)
    return Sequence(tokens, seed=seq.seed, scm_id=seq.scm_id)


def drop_mask(seq: Sequence, cfg: PerturbationConfig) -> np.ndarray:
    """Boolean mask of the time steps ``perturb_sequence`` keeps."""
    L = len(seq)
    if cfg.drop_prob <= 0:
        return np.ones(L, dtype=bool)
    rng = np.random.default_rng(cfg.seed)
    return rng.random(L) >= cfg.drop_prob
