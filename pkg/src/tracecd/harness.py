"""Experiment harness: file-backed generation, training, discovery, evaluation,
sweeps and benchmarks driven by a JSON experiment spec.

Every command is a pure function of the spec and its master seed.  Derived
seeds come from ``derive_seed(master, stream, *indices)`` so that a grid point
or sequence can be recomputed in isolation and concurrent schedules merge to
the same output.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import frequency_discover, granger_scores, random_discover
from .density import (LogLinearModel, TrainHyper, entropy_floor, exact_backend, load_checkpoint,
                      oracle_score, save_checkpoint, train_loglinear)
from .engine import TraceConfig, default_context, graph_from_report, lagged_ig_matrix
from .graphs import InstanceGraph, SummaryGraph, project_summary
from .metrics import GraphScore, aggregate, compare_graphs, scores_to_csv
from .scm import (GroundTruthConfig, InputError, ParameterError, PerturbationConfig, ScmParams,
                  Sequence, drop_mask, generate_scm, ground_truth_instance_graph,
                  perturb_sequence, sample_dataset)

SCHEMA_VERSION = 1
SWEEP_AXES = ("epsilon", "length", "memory", "vocab", "particles", "threshold", "granger_threshold",
              "noise", "drop")
METHODS = ("trace", "granger", "frequency", "random")


class HarnessIOError(OSError):
    """Missing inputs or refused overwrite."""


def derive_seed(master: int, stream: str, *index: int) -> int:
    """Deterministic 63-bit sub-seed for a named stream and grid/sequence index."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(stream.encode())] + [int(i) for i in index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# --------------------------------------------------------------------------
# spec


@dataclass
class ScmSpec:
    vocab_size: int = 50
    memory: int = 3
    sparsity: float = 0.02
    decay_rate: float = 0.5
    weight_scale: float = 8.0
    bias_scale: float = 0.0


@dataclass
class DataSpec:
    n_train: int = 2000
    n_val: int = 200
    n_eval: int = 20
    length: int = 32


@dataclass
class TrainSpec:
    learning_rate: float = 2.0
    batch_size: int = 32
    epochs: int = 50
    l1: float = 0.0
    checkpoints: list = field(default_factory=lambda: [0, 25, 100, 400, 1500, 3000])


@dataclass
class TraceSpec:
    n_particles: int = 256
    threshold: float = 0.02
    context_len: Optional[int] = 20
    max_lag: Optional[int] = None
    aggregation: str = "avg-then-kl"
    shared_mediators: bool = False
    block_rows: int = 8


@dataclass
class BaselineSpec:
    granger_threshold: float = 0.01
    rho: float = 0.01
    top_k: int = 5


@dataclass
class GroundTruthSpec:
    n_counterfactuals: int = 10
    edge_threshold: float = 0.05
    rollout_particles: int = 64
    exact_max_gap: int = 2
    binary_event: bool = True
    mediators: str = "uniform"


@dataclass
class SweepSpec:
    axis: str = "threshold"
    values: list = field(default_factory=lambda: [0.005, 0.01, 0.02, 0.04, 0.08])


@dataclass
class BenchSpec:
    lengths: list = field(default_factory=lambda: [64, 128, 256, 512])
    max_lag: int = 8
    n_particles: int = 8
    vocab_size: int = 8
    context_frac: float = 0.1


_SECTIONS = {"scm": ScmSpec, "data": DataSpec, "train": TrainSpec, "trace": TraceSpec,
             "baselines": BaselineSpec, "ground_truth": GroundTruthSpec, "sweep": SweepSpec,
             "bench": BenchSpec}


@dataclass
class ExperimentSpec:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out: str = "runs/desk"
    backend: str = "exact"
    workers: int = 1
    scm: ScmSpec = field(default_factory=ScmSpec)
    data: DataSpec = field(default_factory=DataSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    trace: TraceSpec = field(default_factory=TraceSpec)
    baselines: BaselineSpec = field(default_factory=BaselineSpec)
    ground_truth: GroundTruthSpec = field(default_factory=GroundTruthSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)

    def validate(self) -> "ExperimentSpec":
        if self.schema_version != SCHEMA_VERSION:
            raise ParameterError(f"unsupported schema_version {self.schema_version!r}")
        if self.backend not in ("exact", "loglinear"):
            raise ParameterError(f"unknown backend {self.backend!r}")
        if self.sweep.axis not in SWEEP_AXES:
            raise ParameterError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}")
        if not self.sweep.values:
            raise ParameterError("sweep grid is empty")
        if not self.bench.lengths:
            raise ParameterError("bench grid is empty")
        if not self.train.checkpoints:
            raise ParameterError("need at least one training checkpoint")
        d = self.data
        if min(d.n_train, d.n_val, d.n_eval) < 1 or d.length < 2:
            raise ParameterError("dataset sizes must be >= 1 and length >= 2")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")
        # construct once so config-level checks fire early
        self.trace_config(0)
        self.gt_config(0)
        return self

    # -- conversion --------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown spec fields: {', '.join(sorted(unknown))}")
        for name, sub in _SECTIONS.items():
            if name in d:
                raw = d[name]
                if not isinstance(raw, dict):
                    raise ParameterError(f"spec section {name!r} must be an object")
                bad = set(raw) - {f.name for f in fields(sub)}
                if bad:
                    raise ParameterError(f"unknown fields in {name!r}: {', '.join(sorted(bad))}")
                d[name] = sub(**raw)
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise HarnessIOError(f"spec file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ParameterError(f"spec file is not valid JSON: {e}") from e
        return cls.from_dict(raw)

    @property
    def fingerprint(self) -> str:
        """Hash of everything except the output location."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    # -- derived configs ---------------------------------------------------

    def trace_config(self, seq_index: int, **overrides) -> TraceConfig:
        kw = asdict(self.trace)
        kw.update(overrides)
        kw.setdefault("seed", derive_seed(self.seed, "trace", seq_index))
        if "seed" not in overrides:
            kw["seed"] = derive_seed(self.seed, "trace", seq_index)
        return TraceConfig(**kw)

    def gt_config(self, seq_index: int) -> GroundTruthConfig:
        return GroundTruthConfig(**asdict(self.ground_truth), seed=derive_seed(self.seed, "gt", seq_index))

    def hyper(self) -> TrainHyper:
        t = self.train
        return TrainHyper(t.learning_rate, t.batch_size, t.epochs, t.l1,
                          derive_seed(self.seed, "trainer"))

    def make_scm(self, **overrides) -> ScmParams:
        kw = asdict(self.scm)
        kw.update(overrides)
        return generate_scm(kw["vocab_size"], kw["memory"], kw["sparsity"], kw["decay_rate"],
                            derive_seed(self.seed, "scm"), kw["weight_scale"], kw["bias_scale"])


PRESETS = {
    "desk": ExperimentSpec,
    "paper": lambda: ExperimentSpec(
        out="runs/paper", scm=ScmSpec(vocab_size=1000, memory=6, sparsity=0.0005, weight_scale=10.0),
        data=DataSpec(n_train=20000, n_val=1000, n_eval=10, length=64),
        trace=TraceSpec(context_len=6, threshold=1.72e-5)),
}


def preset(name: str) -> ExperimentSpec:
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}")
    return PRESETS[name]().validate()


# --------------------------------------------------------------------------
# file helpers


class _Outputs:
    """Collects the files a command will write and refuses to clobber them."""

    def __init__(self, root, force: bool):
        self.root = Path(root)
        self.force = force

    def path(self, rel) -> Path:
        return self.root / rel

    def claim(self, rels):
        if self.force:
            return
        taken = [str(self.path(r)) for r in rels if self.path(r).exists()]
        if taken:
            raise HarnessIOError(f"refusing to overwrite {taken[0]} (use --force)")

    def write_text(self, rel, text: str) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        return p

    def write_json(self, rel, obj) -> Path:
        return self.write_text(rel, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise HarnessIOError(f"{what} not found at {path}; run the producing command first")
    return path


def write_jsonl(seqs) -> str:
    return "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in seqs)


def read_jsonl(path) -> list[Sequence]:
    lines = Path(path).read_text().splitlines()
    return [Sequence.from_dict(json.loads(line)) for line in lines if line.strip()]


def load_scm(path) -> ScmParams:
    return ScmParams.from_dict(json.loads(Path(path).read_text()))


def _fmt(x: float) -> str:
    return f"{x:.10g}"


# --------------------------------------------------------------------------
# generate / train


def cmd_generate(spec: ExperimentSpec, force: bool = False) -> dict:
    """SCM JSON plus train/val/eval sequence JSONL files under ``spec.out``."""
    out = _Outputs(spec.out, force)
    files = ["spec.json", "scm.json", "sequences/train.jsonl", "sequences/val.jsonl",
             "sequences/eval.jsonl"]
    out.claim(files)
    scm = spec.make_scm()
    d = spec.data
    splits = {name: sample_dataset(scm, n, d.length, derive_seed(spec.seed, name))
              for name, n in (("train", d.n_train), ("val", d.n_val), ("eval", d.n_eval))}
    out.write_text("spec.json", spec.to_json())
    out.write_text("scm.json", json.dumps(scm.to_dict(), sort_keys=True) + "\n")
    for name, seqs in splits.items():
        out.write_text(f"sequences/{name}.jsonl", write_jsonl(seqs))
    return {"files": files, "scm_id": scm.fingerprint}


def _train_models(spec, scm, train, val):
    t = spec.train
    return train_loglinear(train, scm.vocab_size, scm.memory, scm.decay, spec.hyper(),
                           checkpoints=t.checkpoints, val=val)


TRAJECTORY_FIELDS = ["step", "loss", "eps_hat", "eps", "delta"]


def cmd_train(spec: ExperimentSpec, force: bool = False) -> dict:
    """Log-linear checkpoints plus a (step, loss, eps_hat, eps, delta) trajectory CSV."""
    root = Path(spec.out)
    scm = load_scm(_need(root / "scm.json", "SCM"))
    train = read_jsonl(_need(root / "sequences/train.jsonl", "training set"))
    val = read_jsonl(_need(root / "sequences/val.jsonl", "validation set"))
    out = _Outputs(root, force)
    steps = sorted(set(int(s) for s in spec.train.checkpoints))
    names = [f"checkpoints/step_{s:06d}.ckpt" for s in steps]
    out.claim(names + ["trajectory.csv"])
    floor, _ = entropy_floor(scm, val)
    models = _train_models(spec, scm, train, val)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_FIELDS)
    written = []
    for model, _ in models:
        rel = f"checkpoints/step_{model.step:06d}.ckpt"
        out.path(rel).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out.path(rel), seed=spec.hyper().seed)
        written.append(rel)
        o = oracle_score(model, val, floor)
        w.writerow([model.step, _fmt(o.loss), _fmt(o.score), _fmt(o.eps), _fmt(o.tv_bound)])
    out.write_text("trajectory.csv", buf.getvalue())
    return {"files": written + ["trajectory.csv"], "entropy_floor": floor}


# --------------------------------------------------------------------------
# backends


def latest_checkpoint(root) -> Path:
    ckpts = sorted(Path(root, "checkpoints").glob("step_*.ckpt"))
    if not ckpts:
        raise HarnessIOError(f"no checkpoints under {root}/checkpoints; run train first")
    return ckpts[-1]


def resolve_backend(spec: ExperimentSpec, checkpoint=None):
    root = Path(spec.out)
    if spec.backend == "exact":
        return exact_backend(load_scm(_need(root / "scm.json", "SCM")))
    path = Path(checkpoint) if checkpoint is not None else latest_checkpoint(root)
    return load_checkpoint(_need(path, "checkpoint"))


# --------------------------------------------------------------------------
# discover


def cmd_discover(spec: ExperimentSpec, checkpoint=None, sequences=None, force: bool = False,
                 dump_report: bool = False) -> dict:
    """Instance and summary graphs (JSON and DOT) for every sequence in a JSONL file."""
    root = Path(spec.out)
    backend = resolve_backend(spec, checkpoint)
    seq_path = Path(sequences) if sequences is not None else root / "sequences/eval.jsonl"
    seqs = read_jsonl(_need(seq_path, "sequence file"))
    for s in seqs:
        if s.tokens.max() >= backend.vocab_size:
            raise InputError(f"sequence uses token {int(s.tokens.max())} but the backend "
                             f"vocabulary has {backend.vocab_size} entries")
    out = _Outputs(root, force)
    files = []
    for k in range(len(seqs)):
        stem = f"graphs/seq_{k:03d}"
        files += [f"{stem}.instance.json", f"{stem}.instance.dot", f"{stem}.summary.json",
                  f"{stem}.summary.dot"]
        if dump_report:
            files.append(f"{stem}.report.json")
    out.claim(files)

    def run(k):
        cfg = spec.trace_config(k)
        rep = lagged_ig_matrix(backend, seqs[k], cfg)
        ig = graph_from_report(rep, cfg.threshold)
        return rep, ig, project_summary(ig)

    for k, (rep, ig, sg) in enumerate(_map(spec.workers, run, range(len(seqs)))):
        stem = f"graphs/seq_{k:03d}"
        out.write_text(f"{stem}.instance.json", ig.to_json() + "\n")
        out.write_text(f"{stem}.instance.dot", ig.to_dot())
        out.write_text(f"{stem}.summary.json", sg.to_json() + "\n")
        out.write_text(f"{stem}.summary.dot", sg.to_dot())
        if dump_report:
            out.write_json(f"{stem}.report.json", report_to_dict(rep))
    return {"files": files}


def report_to_dict(rep) -> dict:
    return {"context": rep.context, "tokens": rep.tokens.tolist(), "config": rep.config,
            "op_count": rep.op_count, "peak_buffer": rep.peak_buffer,
            "batch_digest": rep.batch_digest,
            "pairs": [[j, i, s, float(rep.p_base[j, i]), float(rep.p_do[j, i])]
                      for (j, i), s in rep.items()]}


def cmd_export_dot(graph_json, out_path, force: bool = False) -> str:
    """Re-render a saved instance or summary graph JSON file as DOT."""
    src = _need(Path(graph_json), "graph file")
    d = json.loads(src.read_text())
    kind = d.get("kind")
    if kind == "instance":
        g = InstanceGraph.from_dict(d)
    elif kind == "summary":
        g = SummaryGraph.from_dict(d)
    else:
        raise ParameterError(f"{src} is not a graph file")
    dst = Path(out_path)
    if dst.exists() and not force:
        raise HarnessIOError(f"refusing to overwrite {dst} (use --force)")
    dst.parent.mkdir(parents=True, exist_ok=True)
    dst.write_text(g.to_dot())
    return str(dst)


# --------------------------------------------------------------------------
# evaluation core


def _map(workers, fn, items):
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def restrict_graph(g: InstanceGraph, keep: np.ndarray) -> InstanceGraph:
    """Re-index a graph onto the surviving time steps of a drop perturbation."""
    idx = np.flatnonzero(keep)
    new = {int(o): n for n, o in enumerate(idx)}
    mask = g.testable[np.ix_(idx, idx)]
    edges = {(new[j], new[i]): w for (j, i), w in g.edges.items() if j in new and i in new}
    return InstanceGraph(len(idx), g.tokens[idx], edges, mask.copy(), dict(g.config))


@dataclass
class EvalCase:
    """One evaluation sequence: the clean truth plus what the methods observe."""

    index: int
    truth: InstanceGraph
    observed: Sequence
    context: int


def ground_truth_cases(spec: ExperimentSpec, scm: ScmParams, seqs, context=None) -> list[EvalCase]:
    def run(k):
        s = seqs[k]
        c = context if context is not None else spec.trace_config(k).resolved_context(len(s))
        return EvalCase(k, ground_truth_instance_graph(scm, s, spec.gt_config(k), c), s, c)
    return _map(spec.workers, run, range(len(seqs)))


def perturb_cases(spec: ExperimentSpec, cases, noise=0.0, drop=0.0, point=0) -> list[EvalCase]:
    """Methods see a perturbed copy; truth stays that of the clean sequence."""
    out = []
    V = None
    for case in cases:
        pc = PerturbationConfig(noise, drop, derive_seed(spec.seed, "perturb", point, case.index))
        if V is None:
            V = case.truth.tokens.max() + 1
        if drop > 0:
            keep = drop_mask(case.observed, pc)
            if not keep.any():
                raise ParameterError("a drop perturbation removed every time step")
            obs = perturb_sequence(case.observed, pc, 1)
            c = max(1, int(keep[:case.context].sum()))
            out.append(EvalCase(case.index, restrict_graph(case.truth, keep), obs, c))
        else:
            obs = perturb_sequence(case.observed, pc, _vocab_of(spec, case))
            out.append(EvalCase(case.index, case.truth, obs, case.context))
    return out


def _vocab_of(spec, case):
    return int(case.truth.config.get("vocab_size", spec.scm.vocab_size))


def score_methods(spec: ExperimentSpec, backend, case: EvalCase, trace_overrides=None,
                  thresholds=None, methods=METHODS, report=None, granger_thresholds=None):
    """Score each method on one case.

    Returns ``(rows, report)``; rows are ``(method, threshold_or_None, GraphScore)``.
    With ``thresholds`` the TRACE report is thresholded at each value, and likewise
    ``granger_thresholds`` for the Granger scores (which then carry their threshold).
    """
    over = dict(trace_overrides or {})
    over["context_len"] = case.context
    cfg = spec.trace_config(case.index, **over)
    seq = case.observed
    L = len(seq)
    rows = []
    if report is None and ("trace" in methods or "granger" in methods):
        if case.context < L - 1:
            report = lagged_ig_matrix(backend, seq, cfg)
        else:
            report = _empty_report(seq, case.context, cfg)
    if "trace" in methods:
        for tau in (thresholds if thresholds is not None else [cfg.threshold]):
            rows.append(("trace", tau, compare_graphs(graph_from_report(report, tau), case.truth)))
    b = spec.baselines
    if "granger" in methods:
        scores = granger_scores(report)
        for gt in (granger_thresholds if granger_thresholds is not None else [None]):
            g = InstanceGraph.from_scores(seq.tokens, scores, report.tested,
                                          b.granger_threshold if gt is None else gt)
            rows.append(("granger", gt, compare_graphs(g, case.truth)))
    c = min(case.context, L)
    if "frequency" in methods:
        rows.append(("frequency", None,
                     compare_graphs(frequency_discover(seq, b.top_k, c, cfg.max_lag), case.truth)))
    if "random" in methods:
        r = random_discover(seq, b.rho, c, derive_seed(spec.seed, "random", case.index), cfg.max_lag)
        rows.append(("random", None, compare_graphs(r, case.truth)))
    return rows, report


def _empty_report(seq, c, cfg):
    from .engine import CmiReport
    L = len(seq)
    z = np.zeros((L, L))
    return CmiReport(z, z.copy(), z.copy(), np.zeros((L, L), dtype=bool), seq.tokens.copy(), c,
                     cfg.snapshot())


def _summaries(rows_by_method, config) -> dict:
    return {m: {"mean": s.mean, "std": s.std, "n": len(s.scores)}
            for m, s in ((m, aggregate(v, config)) for m, v in rows_by_method.items())}


# --------------------------------------------------------------------------
# eval


def cmd_eval(spec: ExperimentSpec, checkpoint=None, force: bool = False) -> dict:
    """Per-sequence metrics CSV for TRACE and the baselines, plus a JSON summary."""
    root = Path(spec.out)
    scm = load_scm(_need(root / "scm.json", "SCM"))
    seqs = read_jsonl(_need(root / "sequences/eval.jsonl", "evaluation set"))
    backend = resolve_backend(spec, checkpoint)
    if backend.vocab_size != scm.vocab_size:
        raise InputError("backend and SCM vocabularies differ")
    out = _Outputs(root, force)
    out.claim(["metrics.csv", "summary.json"])
    cases = ground_truth_cases(spec, scm, seqs)
    results = _map(spec.workers, lambda case: score_methods(spec, backend, case)[0], cases)
    rows, by_method = [], {m: [] for m in METHODS}
    for case, res in zip(cases, results):
        for method, _, score in res:
            rows.append((case.index, method, score))
            by_method[method].append(score)
    out.write_text("metrics.csv", scores_to_csv(rows))
    summary = {"spec_fingerprint": spec.fingerprint, "backend": spec.backend,
               "n_sequences": len(seqs), "methods": _summaries(by_method, spec.to_dict())}
    out.write_json("summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# sweep

SWEEP_FIELDS = ["axis", "value", "sequence", "method"] + list(GraphScore.__dataclass_fields__)


def _eval_set(spec, scm, length, point=0):
    return sample_dataset(scm, spec.data.n_eval, length, derive_seed(spec.seed, "eval"))


def _trained_backend(spec, scm, point):
    """Final-checkpoint log-linear model fitted to fresh data from ``scm``."""
    d = spec.data
    train = sample_dataset(scm, d.n_train, d.length, derive_seed(spec.seed, "train", point))
    val = sample_dataset(scm, d.n_val, d.length, derive_seed(spec.seed, "val", point))
    return _train_models(spec, scm, train, val)[-1][0]


def _backend_for(spec, scm, point):
    return exact_backend(scm) if spec.backend == "exact" else _trained_backend(spec, scm, point)


def sweep_points(spec: ExperimentSpec):
    """Yield ``(value, [(sequence, method, GraphScore)], extra)`` for each grid value."""
    axis, values = spec.sweep.axis, list(spec.sweep.values)
    d = spec.data
    if axis in ("threshold", "granger_threshold", "particles", "noise", "drop"):
        scm = spec.make_scm()
        backend = _backend_for(spec, scm, 0)
        cases = ground_truth_cases(spec, scm, _eval_set(spec, scm, d.length))
        if axis == "threshold":
            res = _map(spec.workers, lambda c: score_methods(spec, backend, c, thresholds=values)[0],
                       cases)
            for v in values:
                rows = [(c.index, m, s) for c, r in zip(cases, res) for m, t, s in r
                        if m != "trace" or t == v]
                yield v, rows, {}
            return
        if axis == "granger_threshold":
            res = _map(spec.workers,
                       lambda c: score_methods(spec, backend, c, granger_thresholds=values)[0], cases)
            for v in values:
                rows = [(c.index, m, s) for c, r in zip(cases, res) for m, t, s in r
                        if m != "granger" or t == v]
                yield v, rows, {}
            return
        for p, v in enumerate(values):
            if axis == "particles":
                over, pcs = {"n_particles": int(v)}, cases
            else:
                over = {}
                pcs = perturb_cases(spec, cases, noise=v if axis == "noise" else 0.0,
                                    drop=v if axis == "drop" else 0.0, point=p)
            res = _map(spec.workers, lambda c: score_methods(spec, backend, c, over)[0], pcs)
            yield v, [(c.index, m, s) for c, r in zip(pcs, res) for m, _, s in r], {}
        return
    if axis == "epsilon":
        scm = spec.make_scm()
        train = sample_dataset(scm, d.n_train, d.length, derive_seed(spec.seed, "train"))
        val = sample_dataset(scm, d.n_val, d.length, derive_seed(spec.seed, "val"))
        floor, _ = entropy_floor(scm, val)
        hyper_spec = ExperimentSpec.from_dict({**spec.to_dict(),
                                               "train": {**asdict(spec.train),
                                                         "checkpoints": [int(v) for v in values]}})
        models = {m.step: m for m, _ in _train_models(hyper_spec, scm, train, val)}
        cases = ground_truth_cases(spec, scm, _eval_set(spec, scm, d.length))
        for v in values:
            model = models.get(int(v))
            if model is None:
                raise ParameterError(f"checkpoint step {v} was not reached by training")
            res = _map(spec.workers, lambda c: score_methods(spec, model, c)[0], cases)
            o = oracle_score(model, val, floor)
            yield v, [(c.index, m, s) for c, r in zip(cases, res) for m, _, s in r], \
                {"eps_hat": o.score, "eps": o.eps, "delta": o.tv_bound}
        return
    for p, v in enumerate(values):
        length = d.length
        if axis == "length":
            scm, length = spec.make_scm(), int(v)
        elif axis == "memory":
            scm = spec.make_scm(memory=int(v))
        else:
            scm = spec.make_scm(vocab_size=int(v))
        backend = _backend_for(spec, scm, p)
        ctx = spec.trace.context_len
        context = ctx if ctx is not None and ctx < length - 1 else default_context(length)
        cases = ground_truth_cases(spec, scm, _eval_set(spec, scm, length), context)
        res = _map(spec.workers, lambda c: score_methods(spec, backend, c)[0], cases)
        yield v, [(c.index, m, s) for c, r in zip(cases, res) for m, _, s in r], {}


def cmd_sweep(spec: ExperimentSpec, force: bool = False) -> dict:
    """Long-format CSV (one row per grid value, sequence and method) plus per-point aggregates."""
    axis = spec.sweep.axis
    out = _Outputs(spec.out, force)
    csv_name, json_name = f"sweep_{axis}.csv", f"sweep_{axis}_summary.json"
    out.claim([csv_name, json_name])
    buf = io.StringIO()
    w = csv.DictWriter(buf, SWEEP_FIELDS, lineterminator="\n")
    w.writeheader()
    points = []
    for v, rows, extra in sweep_points(spec):
        by_method = {}
        for k, m, s in rows:
            d = {f: (_fmt(x) if isinstance(x, float) else x) for f, x in asdict(s).items()}
            w.writerow({"axis": axis, "value": v, "sequence": k, "method": m, **d})
            by_method.setdefault(m, []).append(s)
        points.append({"value": v, **extra, "methods": _summaries(by_method, spec.to_dict())})
    out.write_text(csv_name, buf.getvalue())
    summary = {"axis": axis, "spec_fingerprint": spec.fingerprint, "points": points}
    out.write_json(json_name, summary)
    return summary


# --------------------------------------------------------------------------
# bench

BENCH_FIELDS = ["length", "context", "mode", "max_lag", "n_pairs", "op_count", "peak_buffer"]


def _r2(x, y, deg):
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) <= deg:
        return float("nan")
    fit = np.polyval(np.polyfit(x, y, deg), x)
    ss = ((y - y.mean()) ** 2).sum()
    return float(1.0 - ((y - fit) ** 2).sum() / ss) if ss > 0 else 1.0


def run_bench(spec: ExperimentSpec, timer=time.perf_counter):
    """(rows, timings) for sparse and full discovery over the length grid."""
    b = spec.bench
    scm = generate_scm(b.vocab_size, min(3, b.max_lag), 0.2, 0.8,
                       derive_seed(spec.seed, "bench"), 2.0)
    backend = exact_backend(scm)
    rows, timings = [], []
    for L in b.lengths:
        L = int(L)
        seq = sample_dataset(scm, 1, L, derive_seed(spec.seed, "bench", L))[0]
        c = max(1, int(b.context_frac * L))
        for mode, lag in (("sparse", b.max_lag), ("full", None)):
            cfg = TraceConfig(n_particles=b.n_particles, context_len=c, max_lag=lag,
                              seed=derive_seed(spec.seed, "bench-trace", L))
            t0 = timer()
            rep = lagged_ig_matrix(backend, seq, cfg)
            timings.append((L, mode, timer() - t0))
            rows.append({"length": L, "context": c, "mode": mode,
                         "max_lag": lag if lag is not None else "full",
                         "n_pairs": int(rep.tested.sum()), "op_count": rep.op_count,
                         "peak_buffer": rep.peak_buffer})
    return rows, timings


def bench_fits(rows) -> dict:
    out = {}
    for mode in ("sparse", "full"):
        r = [x for x in rows if x["mode"] == mode]
        Ls = [x["length"] for x in r]
        ops = [x["op_count"] for x in r]
        out[mode] = {"linear_r2": _r2(Ls, ops, 1), "quadratic_r2": _r2(Ls, ops, 2),
                     "doubling_ratios": [ops[k + 1] / ops[k] for k in range(len(ops) - 1)
                                         if Ls[k + 1] == 2 * Ls[k]]}
    return out


def cmd_bench(spec: ExperimentSpec, force: bool = False) -> dict:
    """Op-count and peak-buffer table for sparse vs full; wall times go to a separate log."""
    out = _Outputs(spec.out, force)
    out.claim(["bench.csv", "bench_summary.json", "bench_timing.txt"])
    rows, timings = run_bench(spec)
    buf = io.StringIO()
    w = csv.DictWriter(buf, BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out.write_text("bench.csv", buf.getvalue())
    summary = {"spec_fingerprint": spec.fingerprint, "fits": bench_fits(rows)}
    out.write_json("bench_summary.json", summary)
    out.write_text("bench_timing.txt",
                   "".join(f"{L}\t{mode}\t{dt:.6f}s\n" for L, mode, dt in timings))
    return summary
