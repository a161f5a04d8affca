"""Reference discovery rules for comparison with the lagged-information test."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import CmiReport, TraceConfig, lagged_ig_matrix
from .graphs import InstanceGraph
from .scm import ParameterError, Sequence


@dataclass
class BaselineConfig:
    method: str = "granger"
    granger_threshold: float = 0.01
    rho: float = 0.01
    top_k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("granger", "random", "frequency"):
            raise ParameterError(f"unknown baseline {self.method!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError("rho must lie in [0, 1]")
        if self.top_k < 1:
            raise ParameterError("top_k must be >= 1")


def testable_mask(L: int, c: int, max_lag: Optional[int] = None) -> np.ndarray:
    j, i = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    mask = (j >= c) & (i > j)
    if max_lag is not None:
        mask &= (i - j) <= max_lag
    return mask


def granger_scores(report: CmiReport) -> np.ndarray:
    return np.where(report.tested, np.abs(report.p_do - report.p_base), 0.0)


def granger_discover(backend, seq: Sequence, cfg: TraceConfig, threshold: float = 0.01,
                     report: Optional[CmiReport] = None) -> InstanceGraph:
    """Same staircase as TRACE, scored by the absolute change in event probability."""
    report = report if report is not None else lagged_ig_matrix(backend, seq, cfg)
    return InstanceGraph.from_scores(report.tokens, granger_scores(report), report.tested, threshold,
                                     config={"granger": {"threshold": threshold,
                                                         "batch_digest": report.batch_digest}})


def random_discover(seq: Sequence, rho: float, c: int, seed: int = 0,
                    max_lag: Optional[int] = None) -> InstanceGraph:
    if not 0.0 <= rho <= 1.0:
        raise ParameterError("rho must lie in [0, 1]")
    L = len(seq)
    mask = testable_mask(L, c, max_lag)
    draw = np.random.default_rng(seed).random((L, L)) < rho
    scores = (mask & draw).astype(np.float64)
    return InstanceGraph.from_scores(seq.tokens, scores, mask, 0.5,
                                     config={"random": {"rho": rho, "seed": seed}})


def top_k_types(tokens, k: int) -> list:
    counts = Counter(int(t) for t in tokens)
    return [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


def frequency_discover(seq: Sequence, top_k: int, c: int, max_lag: Optional[int] = None) -> InstanceGraph:
    """Treat the ``top_k`` most frequent types of the sequence as causes of everything after them."""
    if top_k < 1:
        raise ParameterError("top_k must be >= 1")
    L = len(seq)
    mask = testable_mask(L, c, max_lag)
    causes = np.isin(seq.tokens, top_k_types(seq.tokens, top_k))
    scores = (mask & causes[:, None]).astype(np.float64)
    return InstanceGraph.from_scores(seq.tokens, scores, mask, 0.5,
                                     config={"frequency": {"top_k": top_k}})
