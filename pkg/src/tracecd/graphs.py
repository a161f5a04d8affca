"""Instance-time and summary causal graphs, with JSON and DOT export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return repr(obj)


def _fmt(w: float) -> str:
    return f"{w:.3g}"


@dataclass
class InstanceGraph:
    """DAG over the time indices of one sequence.

    ``edges`` maps ``(j, i)`` with ``j < i`` to the edge weight; ``testable``
    is the (L, L) mask of pairs that were actually evaluated.
    """

    n_nodes: int
    tokens: np.ndarray
    edges: dict = field(default_factory=dict)
    testable: np.ndarray = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.testable is None:
            self.testable = np.triu(np.ones((self.n_nodes, self.n_nodes), dtype=bool), 1)
        for (j, i) in self.edges:
            if not j < i:
                raise ValueError(f"edge {j}->{i} points backwards in time")

    @classmethod
    def from_scores(cls, tokens, scores, mask, threshold, config=None):
        L = len(tokens)
        keep = mask & (scores > threshold)
        edges = {(int(j), int(i)): float(scores[j, i]) for j, i in zip(*np.nonzero(keep))}
        return cls(L, tokens, edges, mask.copy(), dict(config or {}))

    @property
    def edge_set(self) -> set:
        return set(self.edges)

    def __len__(self):
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for (j, i) in self.edges:
            A[j, i] = True
        return A

    def to_dict(self) -> dict:
        j, i = np.nonzero(self.testable)
        return {
            "kind": "instance",
            "n_nodes": self.n_nodes,
            "tokens": self.tokens.tolist(),
            "edges": [[j_, i_, w] for (j_, i_), w in sorted(self.edges.items())],
            "testable": [[int(a), int(b)] for a, b in zip(j, i)],
            "config": _jsonable(self.config),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceGraph":
        L = int(d["n_nodes"])
        mask = np.zeros((L, L), dtype=bool)
        for a, b in d["testable"]:
            mask[a, b] = True
        edges = {(int(a), int(b)): float(w) for a, b, w in d["edges"]}
        return cls(L, np.asarray(d["tokens"]), edges, mask, d.get("config", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_dot(self, names=None) -> str:
        label = (lambda t: str(names[t])) if names is not None else str
        lines = ["digraph instance {", "  rankdir=LR;"]
        for t, tok in enumerate(self.tokens):
            lines.append(f'  t{t} [label="{label(int(tok))}@{t}"];')
        for (j, i), w in sorted(self.edges.items()):
            lines.append(f'  t{j} -> t{i} [label="{_fmt(w)}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


@dataclass
class SummaryGraph:
    """Type-level projection; cycles and self-loops are allowed."""

    nodes: list
    edges: dict = field(default_factory=dict)  # (u, v) -> (weight, support)

    def __len__(self):
        return len(self.edges)

    @property
    def edge_set(self) -> set:
        return set(self.edges)

    def to_dict(self) -> dict:
        return {
            "kind": "summary",
            "nodes": [int(n) for n in self.nodes],
            "edges": [[u, v, w, s] for (u, v), (w, s) in sorted(self.edges.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SummaryGraph":
        return cls(list(d["nodes"]), {(u, v): (float(w), int(s)) for u, v, w, s in d["edges"]})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_dot(self, names=None) -> str:
        label = (lambda t: str(names[t])) if names is not None else str
        lines = ["digraph summary {"]
        for n in self.nodes:
            lines.append(f'  x{n} [label="{label(int(n))}"];')
        for (u, v), (w, s) in sorted(self.edges.items()):
            lines.append(f'  x{u} -> x{v} [label="{_fmt(w)} (n={s})"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def project_summary(ig: InstanceGraph, tokens=None) -> SummaryGraph:
    """Collapse instance edges onto event types; weight = max, support = count."""
    tokens = ig.tokens if tokens is None else np.asarray(tokens)
    if len(tokens) != ig.n_nodes:
        raise ValueError("tokens do not match the instance graph")
    edges = {}
    for (j, i), w in ig.edges.items():
        key = (int(tokens[j]), int(tokens[i]))
        if key in edges:
            w0, s0 = edges[key]
            edges[key] = (max(w0, w), s0 + 1)
        else:
            edges[key] = (w, 1)
    return SummaryGraph(sorted(int(t) for t in np.unique(tokens)), edges)
