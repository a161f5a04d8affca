import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracecd import (ParameterError, TraceConfig, build_staircase, default_context, discover,
                     error_bound, exact_backend, generate_scm, ground_truth_instance_graph,
                     GroundTruthConfig, lagged_ig_matrix, recommended_threshold, sample_sequence)
from tracecd.engine import BoundValidityWarning, binary_entropy, graph_from_report
from tracecd.scm import InputError, Sequence

from conftest import independence_scm, permutation_scm


@pytest.mark.parametrize("L, c", [(32, 20), (64, 20), (300, 30), (1000, 100), (10, 8), (2, 1)])
def test_default_context(L, c):
    assert default_context(L) == c


def test_default_context_needs_two_tokens():
    with pytest.raises(ParameterError):
        default_context(1)


@pytest.mark.parametrize("kw", [{"n_particles": 0}, {"threshold": -1.0}, {"max_lag": 0},
                                {"aggregation": "median"}, {"proposal": "gauss"},
                                {"block_rows": 0}])
def test_trace_config_validation(kw):
    with pytest.raises(ParameterError):
        TraceConfig(**kw)


def test_context_must_leave_room():
    with pytest.raises(ParameterError):
        TraceConfig(context_len=10).resolved_context(10)


# -- staircase -----------------------------------------------------------------

def test_staircase_rows_keep_growing_prefixes():
    seq = Sequence(np.arange(12) % 5)
    st_ = build_staircase(seq, TraceConfig(n_particles=7, context_len=4, seed=1), 5)
    assert st_.rows.shape == (7, 8, 12)
    for r in range(8):
        np.testing.assert_array_equal(st_.rows[:, r, :4 + r + 1], np.broadcast_to(seq.tokens[:5 + r], (7, 5 + r)))
    np.testing.assert_array_equal(st_.base[:, :4], np.broadcast_to(seq.tokens[:4], (7, 4)))
    # mediators are proposal draws that differ across particles
    assert len({tuple(row) for row in st_.rows[:, 0, 5:]}) > 1


def test_staircase_digest_is_seeded():
    seq = Sequence(np.arange(12) % 5)
    a = build_staircase(seq, TraceConfig(n_particles=4, context_len=4, seed=1), 5).digest()
    b = build_staircase(seq, TraceConfig(n_particles=4, context_len=4, seed=1), 5).digest()
    c = build_staircase(seq, TraceConfig(n_particles=4, context_len=4, seed=2), 5).digest()
    assert a == b != c


def test_shared_mediators_reuse_draws():
    seq = Sequence(np.arange(12) % 5)
    st_ = build_staircase(seq, TraceConfig(n_particles=4, context_len=4, shared_mediators=True), 5)
    np.testing.assert_array_equal(st_.rows[:, 0, 6:], st_.rows[:, 1, 6:])


def test_custom_proposal():
    seq = Sequence(np.zeros(10, dtype=int))
    q = np.array([0.0, 0.0, 1.0])
    st_ = build_staircase(seq, TraceConfig(n_particles=5, context_len=3, proposal=q), 3)
    assert (st_.base[:, 3:] == 2).all()
    with pytest.raises(ParameterError):
        build_staircase(seq, TraceConfig(n_particles=5, context_len=3, proposal=np.ones(4)), 3)


# -- lagged information gain -------------------------------------------------------

def test_independence_gives_zero_scores():
    scm = independence_scm(V=6, m=3)
    seq = sample_sequence(scm, 20, seed=1)
    rep = lagged_ig_matrix(exact_backend(scm), seq, TraceConfig(n_particles=16, context_len=5))
    assert rep.tested.sum() == 15 * 14 // 2
    assert (rep.scores == 0).all()
    ig, sg = discover(exact_backend(scm), seq, TraceConfig(n_particles=16, context_len=5))
    assert len(ig) == 0 and len(sg) == 0


@pytest.mark.parametrize("kw", [{"n_particles": 64, "shared_mediators": True},
                                {"n_particles": 2048}])
def test_permutation_scm_recovers_lag_one_chain(kw):
    scm = permutation_scm(V=3)
    seq = sample_sequence(scm, 12, seed=0)
    cfg = TraceConfig(context_len=4, threshold=0.05, **kw)
    ig, _ = discover(exact_backend(scm), seq, cfg)
    truth = ground_truth_instance_graph(scm, seq, GroundTruthConfig(), 4)
    assert ig.edge_set == truth.edge_set == {(t, t + 1) for t in range(4, 11)}


def test_scores_are_binary_kl_of_particle_means(desk_scm):
    seq = sample_sequence(desk_scm, 28, seed=3)
    rep = lagged_ig_matrix(exact_backend(desk_scm), seq, TraceConfig(n_particles=32, context_len=20))
    for (j, i), s in rep.items():
        a, b = rep.p_base[j, i], rep.p_do[j, i]
        kl = a * math.log(a / b) + (1 - a) * math.log((1 - a) / (1 - b))
        assert s == pytest.approx(kl if kl >= 1e-12 else 0.0, rel=1e-9, abs=1e-15)
        assert s >= 0


def test_kl_then_avg_dominates_avg_then_kl(desk_scm):
    seq = sample_sequence(desk_scm, 28, seed=3)
    be = exact_backend(desk_scm)
    a = lagged_ig_matrix(be, seq, TraceConfig(n_particles=32, context_len=20))
    b = lagged_ig_matrix(be, seq, TraceConfig(n_particles=32, context_len=20, aggregation="kl-then-avg"))
    # Jensen: the mean of KLs is at least the KL of means
    assert (b.scores >= a.scores - 1e-12).all()
    assert a.batch_digest == b.batch_digest


@pytest.mark.parametrize("m", [1, 3, 7])
def test_sparse_matches_full_on_short_lags(desk_scm, m):
    seq = sample_sequence(desk_scm, 30, seed=2)
    be = exact_backend(desk_scm)
    full = lagged_ig_matrix(be, seq, TraceConfig(n_particles=16, context_len=20, seed=5))
    sparse = lagged_ig_matrix(be, seq, TraceConfig(n_particles=16, context_len=20, seed=5, max_lag=m))
    lag = np.subtract.outer(np.arange(30), np.arange(30)) * -1
    keep = full.tested & (lag <= m)
    np.testing.assert_array_equal(sparse.tested, keep)
    assert sparse.scores.tobytes() == np.where(keep, full.scores, 0.0).tobytes()
    assert sparse.op_count < full.op_count


def test_sparse_with_full_reach_is_bitwise_identical(desk_scm):
    seq = sample_sequence(desk_scm, 30, seed=2)
    be = exact_backend(desk_scm)
    full = lagged_ig_matrix(be, seq, TraceConfig(n_particles=16, context_len=20, seed=5))
    sparse = lagged_ig_matrix(be, seq, TraceConfig(n_particles=16, context_len=20, seed=5, max_lag=10,
                                                   block_rows=3))
    assert sparse.same_values(full)
    assert sparse.batch_digest == full.batch_digest


def test_threaded_blocks_match_serial(desk_scm):
    seq = sample_sequence(desk_scm, 40, seed=2)
    be = exact_backend(desk_scm)
    kw = dict(n_particles=16, context_len=20, max_lag=4, block_rows=3, seed=1)
    a = lagged_ig_matrix(be, seq, TraceConfig(**kw))
    b = lagged_ig_matrix(be, seq, TraceConfig(**kw, workers=4))
    assert a.same_values(b) and a.batch_digest == b.batch_digest and a.peak_buffer == b.peak_buffer


def test_report_is_seed_deterministic(desk_scm):
    seq = sample_sequence(desk_scm, 26, seed=2)
    be = exact_backend(desk_scm)
    a = lagged_ig_matrix(be, seq, TraceConfig(n_particles=8, context_len=20, seed=3))
    b = lagged_ig_matrix(be, seq, TraceConfig(n_particles=8, context_len=20, seed=3))
    c = lagged_ig_matrix(be, seq, TraceConfig(n_particles=8, context_len=20, seed=4))
    assert a.same_values(b) and not a.same_values(c)


def test_nothing_testable_gives_empty_report(desk_scm):
    seq = sample_sequence(desk_scm, 5, seed=0)
    rep = lagged_ig_matrix(exact_backend(desk_scm), seq, TraceConfig(context_len=4))
    assert not rep.tested.any() and rep.op_count == 0


def test_vocabulary_mismatch(small_scm, desk_scm):
    seq = sample_sequence(desk_scm, 30, seed=0)
    if seq.tokens.max() < 8:
        seq = Sequence(np.r_[seq.tokens, 40])
    with pytest.raises(InputError):
        lagged_ig_matrix(exact_backend(small_scm), seq, TraceConfig(context_len=20))


def test_op_count_formula(desk_scm):
    L, c, N, m, V = 30, 20, 4, 3, 50
    seq = sample_sequence(desk_scm, L, seed=0)
    be = exact_backend(desk_scm)
    rep = lagged_ig_matrix(be, seq, TraceConfig(n_particles=N, context_len=c, max_lag=m))
    # causes c-1..L-2, each scoring output positions max(j, c)..min(j+m, L-2)
    expected = sum(N * V * (min(j + m, L - 2) - max(j, c) + 1) for j in range(c - 1, L - 1))
    assert rep.op_count == expected


def test_threshold_filters_graph(desk_scm):
    seq = sample_sequence(desk_scm, 32, seed=1)
    rep = lagged_ig_matrix(exact_backend(desk_scm), seq, TraceConfig(n_particles=32, context_len=20))
    sizes = [len(graph_from_report(rep, t)) for t in (0.0, 0.01, 0.1, 1.0, 100.0)]
    assert sizes == sorted(sizes, reverse=True)
    assert sizes[-1] == 0


# -- thresholds ----------------------------------------------------------------

def test_error_bound_at_zero():
    assert error_bound(0.0) == 0.0


def test_error_bound_reference_value():
    # closed form evaluated to 30 digits with arbitrary-precision arithmetic
    assert error_bound(0.05) == pytest.approx(1.14246081019321118663, abs=1e-12)


def test_error_bound_recomputed_independently():
    eps = 0.05
    d = math.sqrt(eps / 2)
    q = d / (1 + d)
    h = -(q * math.log(q) + (1 - q) * math.log1p(-q))
    assert abs(error_bound(eps) - (2 * d * math.log(2) + 2 * (1 + d) * h)) < 1e-9


def test_error_bound_strictly_increasing():
    vals = [error_bound(e) for e in np.linspace(0, 0.5, 100)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_error_bound_warns_outside_tv_regime():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        error_bound(0.5)
    with pytest.warns(BoundValidityWarning):
        error_bound(0.6)
    with pytest.raises(ParameterError):
        error_bound(-0.1)


def test_binary_entropy_edges():
    assert binary_entropy(0.0) == binary_entropy(1.0) == 0.0
    assert binary_entropy(0.5) == pytest.approx(math.log(2))


def test_recommended_threshold():
    assert recommended_threshold(50) == pytest.approx(3.44e-4, rel=1e-12)
    assert recommended_threshold(1000) == pytest.approx(1.72e-5, rel=1e-12)
    with pytest.raises(ParameterError):
        recommended_threshold(1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), L=st.integers(4, 18), N=st.integers(1, 12))
def test_reports_respect_time_order_and_nonnegativity(seed, L, N):
    scm = generate_scm(6, 2, 0.4, 0.8, seed=seed % 1000, weight_scale=4.0)
    seq = sample_sequence(scm, L, seed=seed)
    rep = lagged_ig_matrix(exact_backend(scm), seq, TraceConfig(n_particles=N, seed=seed))
    j, i = np.nonzero(rep.tested)
    assert (j < i).all() and (j >= rep.context).all()
    assert (rep.scores >= 0).all()
    assert (rep.scores[~rep.tested] == 0).all()
