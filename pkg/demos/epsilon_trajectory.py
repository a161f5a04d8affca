"""Discovery quality along a training trajectory of the log-linear density model.

Imperfect models lose recall before they lose precision. Each checkpoint reports the
oracle score, the total-variation bound it implies and the resulting error bound.

Run: python demos/epsilon_trajectory.py
"""

import numpy as np

from tracecd import error_bound, oracle_score, train_loglinear
from tracecd.density import entropy_floor
from tracecd.harness import ExperimentSpec, derive_seed, ground_truth_cases, score_methods
from tracecd.metrics import aggregate
from tracecd.scm import sample_dataset

spec = ExperimentSpec(seed=0)
scm, d = spec.make_scm(), spec.data
train = sample_dataset(scm, d.n_train, d.length, derive_seed(spec.seed, "train"))
val = sample_dataset(scm, d.n_val, d.length, derive_seed(spec.seed, "val"))
floor, _ = entropy_floor(scm, val)
cases = ground_truth_cases(spec, scm, sample_dataset(scm, d.n_eval, d.length,
                                                     derive_seed(spec.seed, "eval")))

trajectory = train_loglinear(train, scm.vocab_size, scm.memory, scm.decay, spec.hyper(),
                             checkpoints=[50, 100, 200, 400, 1500, 3000], val=val)
print(f"{'step':>5} {'eps_hat':>8} {'delta':>6} {'bound':>6} {'prec':>5} {'recall':>6} {'F1':>5}")
for model, _ in trajectory:
    o = oracle_score(model, val, floor)
    scores = [s for c in cases for _, _, s in score_methods(spec, model, c, methods=("trace",))[0]]
    m = aggregate(scores).mean
    bound = error_bound(o.eps) if o.tv_bound <= 0.5 else float("nan")
    print(f"{model.step:5d} {o.score:8.3f} {o.tv_bound:6.3f} {bound:6.3f} "
          f"{m['precision']:5.2f} {m['recall']:6.2f} {m['f1']:5.2f}")
print(f"\nentropy floor {floor:.3f} nats/token, ln|X| = {np.log(scm.vocab_size):.3f}")
