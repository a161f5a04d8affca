import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracecd import (LogLinearModel, ParameterError, TrainHyper, TrainingError, exact_backend,
                     generate_scm, kl_gap, load_checkpoint, oracle_score, sample_dataset,
                     save_checkpoint, train_loglinear, transition_dist)
from tracecd.density import entropy_floor, min_validation_floor, negative_log_likelihood
from tracecd.scm import InputError

from conftest import independence_scm, permutation_scm


def test_exact_backend_delegates_to_kernel(small_scm):
    be = exact_backend(small_scm)
    rng = np.random.default_rng(0)
    for _ in range(100):
        T = int(rng.integers(1, 12))
        prefix = rng.integers(0, 8, size=T)
        got = be.next_token_probs(prefix[None], np.array([[T - 1]]))[0, 0]
        np.testing.assert_allclose(got, transition_dist(small_scm, prefix), rtol=0, atol=1e-15)


def test_empty_history_position(small_scm):
    be = exact_backend(small_scm)
    got = be.next_token_probs(np.zeros((1, 3), dtype=int), np.array([[-1]]))[0, 0]
    np.testing.assert_allclose(got, transition_dist(small_scm, []))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), B=st.integers(1, 6), T=st.integers(1, 15))
def test_eval_batch_valid_and_row_order_independent(seed, B, T):
    rng = np.random.default_rng(seed)
    scm = generate_scm(6, 3, 0.5, 0.9, seed=seed, weight_scale=5.0)
    model = LogLinearModel(rng.normal(size=6), rng.normal(size=(2, 6, 6)) * 3, np.array([1.0, 0.6]))
    toks = rng.integers(0, 6, size=(B, T))
    lengths = rng.integers(1, T + 1, size=B)
    perm = rng.permutation(B)
    for be in (exact_backend(scm), model):
        out = be.eval_batch(toks, lengths)
        assert out.shape == (B, T, 6)
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)
        np.testing.assert_array_equal(be.eval_batch(toks[perm], lengths[perm]), out[perm])


def test_backend_rejects_foreign_tokens(small_scm):
    with pytest.raises(InputError):
        exact_backend(small_scm).next_token_probs(np.array([[8]]), np.array([[0]]))


# -- training -----------------------------------------------------------------

def _numeric_grad(model, toks, h=1e-5):
    gb = np.zeros_like(model.bias)
    gW = np.zeros_like(model.weights)
    for arr, g in ((model.bias, gb), (model.weights, gW)):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = model.loss(toks)
            flat[k] = old - h
            down = model.loss(toks)
            flat[k] = old
            gflat[k] = (up - down) / (2 * h)
    return gb, gW


@pytest.mark.parametrize("point", range(20))
def test_gradient_matches_finite_differences(point):
    rng = np.random.default_rng(100 + point)
    V, m = 5, 2
    model = LogLinearModel(rng.normal(size=V), rng.normal(size=(m, V, V)), np.array([1.0, 0.7]))
    toks = rng.integers(0, V, size=(4, 7))
    _, gb, gW = model.loss_and_grad(toks)
    nb, nW = _numeric_grad(model, toks)
    a = np.concatenate([gb, gW.ravel()])
    n = np.concatenate([nb, nW.ravel()])
    assert np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n)) < 1e-5


def test_zero_steps_is_uniform_model(small_scm):
    data = sample_dataset(small_scm, 10, 12, seed=0)
    [(model, loss)] = train_loglinear(data, 8, 2, small_scm.decay, checkpoints=[0])
    assert model.step == 0
    assert loss == pytest.approx(math.log(8), abs=1e-12)


def test_training_reaches_entropy_floor():
    scm = generate_scm(10, 2, 0.2, 0.8, seed=4, weight_scale=4.0)
    train = sample_dataset(scm, 1000, 24, seed=1)
    val = sample_dataset(scm, 300, 24, seed=2)
    hyper = TrainHyper(learning_rate=2.0, epochs=60, seed=0)
    [(model, loss)] = train_loglinear(train, 10, 2, scm.decay, hyper, checkpoints=[1800], val=val)
    floor, _ = entropy_floor(scm, val)
    assert model.step == 1800
    assert loss - floor < 0.02


def test_training_loss_non_increasing_after_burn_in(desk_scm):
    """Median over seeds of the number of epoch-to-epoch loss increases is zero."""
    train = sample_dataset(desk_scm, 400, 32, seed=5)
    ups = []
    for seed in range(5):
        losses = []
        hyper = TrainHyper(epochs=8, seed=seed)
        train_loglinear(train, 50, 3, desk_scm.decay, hyper, checkpoints=[10**9],
                        on_epoch=lambda e, m: losses.append(m.loss(train)))
        ups.append(sum(b > a for a, b in zip(losses[1:], losses[2:])))
    assert np.median(ups) == 0


def test_checkpoints_are_snapshots(small_scm):
    data = sample_dataset(small_scm, 64, 10, seed=0)
    out = train_loglinear(data, 8, 2, small_scm.decay, TrainHyper(epochs=5), checkpoints=[3, 0, 6])
    assert [m.step for m, _ in out] == [0, 3, 6]
    assert not np.array_equal(out[1][0].weights, out[2][0].weights)
    assert out[0][1] > out[2][1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_last_good(small_scm):
    data = sample_dataset(small_scm, 64, 10, seed=0)
    with pytest.raises(TrainingError) as info:
        train_loglinear(data, 8, 2, small_scm.decay, TrainHyper(learning_rate=1e308, epochs=3),
                        checkpoints=[0, 50])
    assert info.value.last_good is not None and info.value.last_good.step == 0


def test_training_input_validation(small_scm):
    with pytest.raises(ParameterError):
        train_loglinear(np.zeros((0, 5), dtype=int), 8, 2, small_scm.decay)
    with pytest.raises(InputError):
        train_loglinear(np.full((2, 5), 9), 8, 2, small_scm.decay)
    with pytest.raises(ParameterError):
        LogLinearModel.zeros(4, 2, [1.0])


# -- fidelity -----------------------------------------------------------------

def test_oracle_score_endpoints(small_scm):
    val = sample_dataset(small_scm, 50, 16, seed=1)
    uniform = LogLinearModel.zeros(8, 2, small_scm.decay)
    o = oracle_score(uniform, val, entropy_floor=1.0)
    assert o.score == pytest.approx(1.0, abs=1e-12)
    exact = exact_backend(small_scm)
    o = oracle_score(exact, val, entropy_floor=negative_log_likelihood(exact, val))
    assert o.score == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ParameterError):
        oracle_score(uniform, val, math.log(8))


def test_tv_bound_uses_raw_gap(small_scm):
    val = sample_dataset(small_scm, 50, 16, seed=1)
    o = oracle_score(LogLinearModel.zeros(8, 2, small_scm.decay), val, entropy_floor=0.5)
    assert o.tv_bound == pytest.approx(math.sqrt(o.eps / 2))
    assert o.tv_bound != pytest.approx(math.sqrt(o.score / 2))
    assert o.tv_violation == (o.tv_bound > 0.5)


def test_exact_backend_has_zero_excess(desk_scm):
    val = sample_dataset(desk_scm, 200, 32, seed=3)
    floor, se = entropy_floor(desk_scm, val)
    o = oracle_score(exact_backend(desk_scm), val, floor)
    assert abs(o.eps) <= 2 * se


def test_kl_gap_exact_is_zero(small_scm):
    mean, _ = kl_gap(exact_backend(small_scm), small_scm, 20, 10, seed=0)
    assert abs(mean) < 1e-12


def test_kl_gap_uniform_vs_deterministic():
    scm = permutation_scm(V=4, strength=200.0)
    scm.bias[0] = 50.0
    mean, _ = kl_gap(LogLinearModel.zeros(4, 1, np.ones(1)), scm, 10, 8, seed=0)
    assert mean == pytest.approx(math.log(4), abs=1e-6)


def test_kl_gap_tracks_raw_eps(desk_scm):
    train = sample_dataset(desk_scm, 600, 32, seed=1)
    val = sample_dataset(desk_scm, 300, 32, seed=2)
    floor, _ = entropy_floor(desk_scm, val)
    from tracecd.scm import conditional_entropies
    data = np.stack([s.tokens for s in val])
    H = conditional_entropies(desk_scm, data)
    for model, _ in train_loglinear(train, 50, 3, desk_scm.decay, TrainHyper(epochs=10),
                                    checkpoints=[20, 80, 180]):
        p = model.next_token_probs(data, np.broadcast_to(np.arange(-1, 31), data.shape))
        nll = -np.log(np.take_along_axis(p, data[..., None], -1)[..., 0])
        per_seq = (nll - H).mean(axis=1)
        eps, se_eps = per_seq.mean(), per_seq.std(ddof=1) / np.sqrt(len(per_seq))
        assert oracle_score(model, val, floor).eps == pytest.approx(eps, abs=1e-9)
        kl, se_kl = kl_gap(model, desk_scm, 300, 32, seed=9)
        assert abs(kl - eps) <= 2 * math.hypot(se_kl, se_eps)


def test_min_validation_floor():
    assert min_validation_floor([3.2, 3.1, 3.15]) == 3.1


def test_checkpoint_roundtrip(tmp_path, small_scm):
    data = sample_dataset(small_scm, 32, 10, seed=0)
    [(model, _)] = train_loglinear(data, 8, 2, small_scm.decay, checkpoints=[5])
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, seed=7)
    back = load_checkpoint(path)
    assert back.step == 5
    assert back.weights.tobytes() == model.weights.tobytes()
    assert back.bias.tobytes() == model.bias.tobytes()
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(InputError):
        load_checkpoint(path)


def test_checkpoint_layout(tmp_path):
    import json
    import struct
    model = LogLinearModel.zeros(3, 1, [1.0])
    model.bias[:] = [1.0, 2.0, 3.0]
    save_checkpoint(model, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    assert header["vocab_size"] == 3 and header["memory"] == 1
    assert struct.unpack("<3d", raw[8 + n:8 + n + 24]) == (1.0, 2.0, 3.0)
