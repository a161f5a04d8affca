"""Parallel Monte-Carlo lagged information gain over a single sequence.

The staircase batch holds, for every candidate cause ``j >= c``, one row that
keeps ``x_0..x_j`` and replaces every later position with a proposal draw
(the mediators).  Comparing the observed-token probability at a target ``i``
between the row of ``j`` (cause kept) and the row of ``j - 1`` (cause
randomised too) gives the lagged information gain of ``j -> i``.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Optional, Union

import numpy as np

from .graphs import InstanceGraph, SummaryGraph, project_summary
from .scm import ParameterError, InputError, Sequence, binary_kl

ZERO_CUTOFF = 1e-12
RECOMMENDED_C = 1.72e-2


class BoundValidityWarning(UserWarning):
    """The error bound is evaluated outside the TV <= 1/2 regime."""


@dataclass
class TraceConfig:
    n_particles: int = 256
    threshold: float = 0.0
    context_len: Optional[int] = None  # None -> default_context(L)
    max_lag: Optional[int] = None  # None -> full variant
    proposal: Union[str, np.ndarray] = "uniform"
    aggregation: str = "avg-then-kl"
    shared_mediators: bool = False
    block_rows: int = 8
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ParameterError("n_particles must be >= 1")
        if self.threshold < 0:
            raise ParameterError("threshold must be non-negative")
        if self.max_lag is not None and self.max_lag < 1:
            raise ParameterError("max_lag must be >= 1 or None for the full variant")
        if self.aggregation not in ("avg-then-kl", "kl-then-avg"):
            raise ParameterError(f"unknown aggregation {self.aggregation!r}")
        if self.block_rows < 1:
            raise ParameterError("block_rows must be >= 1")
        if isinstance(self.proposal, str) and self.proposal != "uniform":
            raise ParameterError(f"unknown proposal {self.proposal!r}")

    def snapshot(self) -> dict:
        d = asdict(self)
        if not isinstance(self.proposal, str):
            d["proposal"] = np.asarray(self.proposal).tolist()
        return d

    def resolved_context(self, L: int) -> int:
        c = default_context(L) if self.context_len is None else int(self.context_len)
        if not 0 < c < L:
            raise ParameterError(f"context {c} must satisfy 0 < c < L={L}")
        return c


def default_context(L: int) -> int:
    """max(floor(0.1 L), 20), clamped so at least one pair stays testable."""
    if L < 2:
        raise ParameterError("need L >= 2")
    return max(1, min(max(int(0.1 * L), 20), L - 2))


# --------------------------------------------------------------------------
# staircase


def _draw_mediators(cfg: TraceConfig, row: int, L: int, V: int) -> np.ndarray:
    """(N, L) proposal draws for one staircase row; row -1 is the extra base row."""
    key = 0 if cfg.shared_mediators else row + 2
    rng = np.random.default_rng([cfg.seed, key])
    N = cfg.n_particles
    if isinstance(cfg.proposal, str):
        return rng.integers(0, V, size=(N, L))
    q = np.asarray(cfg.proposal, dtype=np.float64)
    if q.shape != (V,):
        raise ParameterError("proposal vector must have one entry per token")
    return rng.choice(V, size=(N, L), p=q / q.sum())


def staircase_row(tokens: np.ndarray, cause: int, cfg: TraceConfig, row: int, V: int) -> np.ndarray:
    """Keep x_0..x_cause, randomise everything after it."""
    L = len(tokens)
    med = _draw_mediators(cfg, row, L, V)
    keep = np.arange(L) <= cause
    return np.where(keep[None, :], tokens[None, :], med)


@dataclass
class Staircase:
    rows: np.ndarray  # (N, R, L), R = L - c; row r keeps x_0..x_{c+r}
    base: np.ndarray  # (N, L); keeps x_0..x_{c-1}
    context: int

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.base).tobytes())
        h.update(np.ascontiguousarray(self.rows).tobytes())
        return h.hexdigest()


def build_staircase(seq: Sequence, cfg: TraceConfig, vocab_size: int) -> Staircase:
    tokens = seq.tokens
    L = len(tokens)
    c = cfg.resolved_context(L)
    rows = np.stack([staircase_row(tokens, c + r, cfg, r, vocab_size) for r in range(L - c)], axis=1)
    base = staircase_row(tokens, c - 1, cfg, -1, vocab_size)
    return Staircase(rows, base, c)


# --------------------------------------------------------------------------
# lagged information gain


@dataclass
class CmiReport:
    scores: np.ndarray  # (L, L); zero where not tested
    p_base: np.ndarray  # (L, L) particle-averaged event probabilities
    p_do: np.ndarray
    tested: np.ndarray  # (L, L) bool
    tokens: np.ndarray
    context: int
    config: dict = field(default_factory=dict)
    op_count: int = 0
    peak_buffer: int = 0
    batch_digest: str = ""

    def items(self):
        for j, i in zip(*np.nonzero(self.tested)):
            yield (int(j), int(i)), float(self.scores[j, i])

    def same_values(self, other: "CmiReport") -> bool:
        return (np.array_equal(self.tested, other.tested)
                and self.scores.tobytes() == other.scores.tobytes()
                and self.p_base.tobytes() == other.p_base.tobytes()
                and self.p_do.tobytes() == other.p_do.tobytes()
                and self.op_count == other.op_count)


def _row_window(cause: int, c: int, L: int, m: int):
    """Output positions a row contributes: as do-row for ``cause`` and base-row for ``cause + 1``."""
    lo = max(cause, c)
    hi = min(cause + m, L - 2)
    return lo, hi


def _event_probs(backend, tokens, causes, rows_ids, cfg, c, m, V):
    """Observed-token probabilities for a block of staircase rows.

    Returns ({row: (start, (N, width) array)}, batch digests, op_count, buffer_size).
    """
    L = len(tokens)
    N = cfg.n_particles
    windows = [_row_window(j, c, L, m) for j in causes]
    width = max(hi - lo + 1 for lo, hi in windows)
    batch = np.stack([staircase_row(tokens, j, cfg, r, V) for j, r in zip(causes, rows_ids)], axis=1)
    nb = len(causes)
    pos = np.empty((nb, width), dtype=np.int64)
    for b, (lo, hi) in enumerate(windows):
        pos[b] = np.minimum(np.arange(lo, lo + width), hi)
    flat_tokens = batch.reshape(N * nb, L)
    flat_pos = np.broadcast_to(pos[None], (N, nb, width)).reshape(N * nb, width)
    probs = backend.next_token_probs(flat_tokens, flat_pos)  # (N*nb, width, V)
    if probs.shape != (N * nb, width, V):
        raise InputError("backend returned an array of the wrong shape")
    target = tokens[np.minimum(flat_pos + 1, L - 1)]
    ev = np.take_along_axis(probs, target[..., None], axis=-1)[..., 0].reshape(N, nb, width)
    out = {}
    digests = {}
    ops = 0
    for b, ((lo, hi), r) in enumerate(zip(windows, rows_ids)):
        n_valid = hi - lo + 1
        out[r] = (lo, np.ascontiguousarray(ev[:, b, :n_valid]))
        digests[r] = hashlib.sha256(np.ascontiguousarray(batch[:, b]).tobytes()).digest()
        ops += N * n_valid * V
    return out, digests, ops, probs.size


def lagged_ig_matrix(backend, seq: Sequence, cfg: TraceConfig) -> CmiReport:
    """Score every testable pair ``c <= j < i < L`` with ``i - j <= max_lag``."""
    tokens = seq.tokens
    V = backend.vocab_size
    if tokens.min() < 0 or tokens.max() >= V:
        raise InputError("sequence uses tokens outside the backend vocabulary")
    L = len(tokens)
    c = cfg.resolved_context(L)
    sparse = cfg.max_lag is not None
    m = min(cfg.max_lag, L) if sparse else L
    N = cfg.n_particles
    if c >= L - 1:
        z = np.zeros((L, L))
        return CmiReport(z, z.copy(), z.copy(), np.zeros((L, L), dtype=bool), tokens.copy(), c,
                         cfg.snapshot(), 0, 0, hashlib.sha256().hexdigest())

    # rows needed: base row (cause c-1) and one per cause c..L-2
    causes = list(range(c - 1, L - 1))
    row_ids = [j - c for j in causes]
    block = cfg.block_rows if sparse else max(1, len(causes))
    blocks = [(causes[a:a + block], row_ids[a:a + block]) for a in range(0, len(causes), block)]

    def run(bl):
        return _event_probs(backend, tokens, bl[0], bl[1], cfg, c, m, V)

    if cfg.workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(run, blocks))
    else:
        results = [run(b) for b in blocks]

    events = {}
    row_digests = {}
    ops = 0
    transient = 0
    for ev, dg, o, buf in results:
        events.update(ev)
        row_digests.update(dg)
        ops += o
        transient = max(transient, buf)
    retained = sum(a.size for _, a in events.values())
    peak = retained + transient

    scores = np.zeros((L, L))
    p_base = np.zeros((L, L))
    p_do = np.zeros((L, L))
    tested = np.zeros((L, L), dtype=bool)
    for j in range(c, L - 1):
        lo_do, ev_do = events[j - c]
        lo_b, ev_b = events[j - c - 1]
        for i in range(j + 1, min(j + m, L - 1) + 1):
            do_l = ev_do[:, i - 1 - lo_do]
            base_l = ev_b[:, i - 1 - lo_b]
            pb, pd = float(base_l.mean()), float(do_l.mean())
            if cfg.aggregation == "avg-then-kl":
                s = float(binary_kl(pb, pd))
            else:
                s = float(binary_kl(base_l, do_l).mean())
            scores[j, i] = 0.0 if s < ZERO_CUTOFF else s
            p_base[j, i] = pb
            p_do[j, i] = pd
            tested[j, i] = True

    digest = hashlib.sha256()
    for r in row_ids:
        digest.update(row_digests[r])
    return CmiReport(scores, p_base, p_do, tested, tokens.copy(), c, cfg.snapshot(),
                     int(ops), int(peak), digest.hexdigest())


def discover_instance_graph(backend, seq: Sequence, cfg: TraceConfig,
                            report: Optional[CmiReport] = None) -> InstanceGraph:
    """Instance-time graph: every tested pair whose lagged gain exceeds the threshold."""
    report = report if report is not None else lagged_ig_matrix(backend, seq, cfg)
    return graph_from_report(report, cfg.threshold)


def graph_from_report(report: CmiReport, threshold: float) -> InstanceGraph:
    conf = dict(report.config)
    conf["threshold"] = threshold
    return InstanceGraph.from_scores(report.tokens, report.scores, report.tested, threshold,
                                     config={"trace": conf, "context": report.context})


def discover(backend, seq: Sequence, cfg: TraceConfig) -> tuple[InstanceGraph, SummaryGraph]:
    ig = discover_instance_graph(backend, seq, cfg)
    return ig, project_summary(ig, seq.tokens)


# --------------------------------------------------------------------------
# thresholds


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log(p) - (1.0 - p) * math.log(1.0 - p)


def error_bound(eps: float) -> float:
    """Asymptotic |I - I_N| bound (nats) for a model with per-step KL gap ``eps``."""
    if eps < 0:
        raise ParameterError("eps must be non-negative")
    d = math.sqrt(eps / 2.0)
    if d > 0.5:
        warnings.warn(f"TV bound {d:.3f} exceeds 1/2; the error bound is outside its validity regime",
                      BoundValidityWarning, stacklevel=2)
    return 2.0 * d * math.log(2.0) + 2.0 * (1.0 + d) * binary_entropy(d / (1.0 + d))


def recommended_threshold(vocab_size: int) -> float:
    if vocab_size < 2:
        raise ParameterError("vocab_size must be >= 2")
    return RECOMMENDED_C / vocab_size
