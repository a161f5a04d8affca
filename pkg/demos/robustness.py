"""Precision and recall under token substitution noise and temporal drops.

Run: python demos/robustness.py
"""

from tracecd import exact_backend
from tracecd.harness import (ExperimentSpec, derive_seed, ground_truth_cases, perturb_cases,
                             score_methods)
from tracecd.metrics import aggregate
from tracecd.scm import sample_dataset

spec = ExperimentSpec(seed=0)
scm = spec.make_scm()
backend = exact_backend(scm)
seqs = sample_dataset(scm, spec.data.n_eval, spec.data.length, derive_seed(spec.seed, "eval"))
cases = ground_truth_cases(spec, scm, seqs)


def row(label, pcs):
    scores = [s for c in pcs for _, _, s in score_methods(spec, backend, c, methods=("trace",))[0]]
    m = aggregate(scores).mean
    print(f"{label:<12} precision {m['precision']:.2f}  recall {m['recall']:.2f}  F1 {m['f1']:.2f}")


for k, p in enumerate([0.0, 0.2, 0.4]):
    row(f"noise {p:.1f}", perturb_cases(spec, cases, noise=p, point=k))
for k, p in enumerate([0.1, 0.2, 0.4]):
    row(f"drop {p:.1f}", perturb_cases(spec, cases, drop=p, point=k))
