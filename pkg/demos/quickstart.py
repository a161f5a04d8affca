"""Recover the instance graph of one sequence with the exact-oracle backend.

Run: python demos/quickstart.py
"""

from tracecd import (GroundTruthConfig, TraceConfig, compare_graphs, discover, exact_backend,
                     generate_scm, ground_truth_instance_graph, sample_sequence)

scm = generate_scm(vocab_size=50, memory=3, sparsity=0.02, decay_rate=0.5, seed=0, weight_scale=8.0)
seq = sample_sequence(scm, length=32, seed=1)
cfg = TraceConfig(n_particles=256, threshold=0.02, context_len=20, seed=0)

instance, summary = discover(exact_backend(scm), seq, cfg)
truth = ground_truth_instance_graph(scm, seq, GroundTruthConfig(seed=0), context=20)

print("tokens:", " ".join(map(str, seq.tokens)))
print(f"\n{len(instance)} instance edges (j -> i, score in nats):")
for (j, i), w in sorted(instance.edges.items()):
    mark = "" if (j, i) in truth.edge_set else "   <- not in ground truth"
    print(f"  {j:2d} -> {i:2d}  {w:.3f}{mark}")
missed = truth.edge_set - instance.edge_set
print("missed:", sorted(missed) or "none")

s = compare_graphs(instance, truth)
print(f"\nprecision {s.precision:.2f}  recall {s.recall:.2f}  F1 {s.f1:.2f}  SHD {s.shd}")
print(f"summary graph over event types: {sorted(summary.edge_set)}")
print("\nDOT:\n" + summary.to_dot())
