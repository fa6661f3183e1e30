from __future__ import annotations

import math

import numpy as np
import numpy.testing as npt
import pytest

from portrisk.errors import DataError, NumericalError
from portrisk.features import EncodedExample
from portrisk.neural import (Calibrator, ModelConfig, RiskModel, SoftTargets,
                             TENSOR_ORDER, adam_step, check_schema, forward,
                             forward_batch, gradient_check, init_model,
                             load_model, loss_and_grad, loss_and_grad_arrays,
                             save_model)

from oracles import forward_reference

TINY = ModelConfig(embed_dim=2, hidden_dim=2, attn_dim=2, dense_dim=2, seed=123)


def tiny_model(config=TINY, n_vocab=3, n_expert=4, schema_hash="h"):
    return init_model(config, schema_hash, n_vocab, n_expert)


def random_example(rng, n_vocab=3, n_buckets=12, n_expert=4):
    return EncodedExample(
        sequence=rng.integers(0, 3, size=(n_buckets, n_vocab)).astype(float),
        expert=rng.normal(size=n_expert),
        label=bool(rng.integers(0, 2)))


def test_zero_parameters_score_half():
    model = tiny_model()
    for name in model.params:
        model.params[name][:] = 0.0
    rng = np.random.default_rng(0)
    score, _ = forward(model, random_example(rng))
    assert score == 0.5


def test_identical_hidden_states_uniform_attention():
    model = tiny_model()
    for name in model.params:
        model.params[name][:] = 0.0   # all hidden states collapse to zero
    rng = np.random.default_rng(1)
    _, cache = forward(model, random_example(rng))
    npt.assert_allclose(cache["alpha"], 1.0 / 12.0, atol=0)


def test_attention_weights_sum_to_one():
    rng = np.random.default_rng(7)
    for trial in range(20):
        model = tiny_model(ModelConfig(2, 3, 2, 2, seed=trial), n_vocab=4)
        seq = rng.integers(0, 4, size=(5, 12, 4)).astype(float)
        expert = rng.normal(size=(5, 4))
        _, cache = forward_batch(model, seq, expert)
        alpha = cache["alpha"]
        assert np.all(alpha >= 0.0)
        npt.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-9)


def test_forward_matches_independent_reference():
    rng = np.random.default_rng(42)
    model = tiny_model()
    for trial in range(25):
        ex = random_example(rng)
        score, _ = forward(model, ex)
        params = {k: v.tolist() for k, v in model.params.items()}
        ref = forward_reference(params, ex.sequence.tolist(), ex.expert.tolist())
        assert score == pytest.approx(ref, abs=1e-12)


def test_forward_eval_mode_is_pure():
    rng = np.random.default_rng(3)
    model = tiny_model(ModelConfig(2, 2, 2, 2, dropout_rate=0.5, seed=5))
    ex = random_example(rng)
    s1, _ = forward(model, ex, train_mode=False)
    s2, _ = forward(model, ex, train_mode=False)
    assert s1 == s2


def test_dropout_active_only_in_train_mode():
    model = tiny_model(ModelConfig(4, 4, 4, 4, dropout_rate=0.5, seed=5),
                       n_vocab=3)
    rng = np.random.default_rng(3)
    ex = random_example(rng)
    scores = {forward(model, ex, train_mode=True,
                      rng=np.random.default_rng(t))[0] for t in range(8)}
    assert len(scores) > 1


# --- loss and gradients --------------------------------------------------

def test_loss_symmetric_half():
    model = tiny_model()
    for name in model.params:
        model.params[name][:] = 0.0   # score exactly 0.5
    rng = np.random.default_rng(0)
    loss, _ = loss_and_grad(model, [random_example(rng)], [0.5])
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)


def test_gradients_vanish_at_own_scores():
    rng = np.random.default_rng(9)
    model = tiny_model()
    batch = [random_example(rng) for _ in range(6)]
    scores = np.array([forward(model, ex)[0] for ex in batch])
    _, grads = loss_and_grad(model, batch, scores)
    for name, g in grads.items():
        assert np.all(g == 0.0), f"nonzero gradient in {name}"


def test_empty_batch_fatal():
    with pytest.raises(DataError, match="empty batch"):
        loss_and_grad(tiny_model(), [], [])


def test_targets_validated():
    rng = np.random.default_rng(1)
    model = tiny_model()
    with pytest.raises(DataError):
        loss_and_grad(model, [random_example(rng)], [1.5])
    with pytest.raises(DataError):
        loss_and_grad(model, [random_example(rng)], [0.2, 0.4])


def test_soft_target_loss_bounded_by_entropy():
    rng = np.random.default_rng(12)
    model = tiny_model()
    for _ in range(20):
        ex = random_example(rng)
        t = float(rng.uniform(0.05, 0.95))
        loss, _ = loss_and_grad(model, [ex], [t])
        entropy = -(t * math.log(t) + (1 - t) * math.log(1 - t))
        assert loss >= entropy - 1e-12


def test_gradient_check_passes():
    report = gradient_check(n_trials=4, seed=11)
    assert report.passed
    assert report.max_rel_err < 1e-4


def test_gradient_check_negative_control():
    report = gradient_check(n_trials=1, seed=11, corrupt_first_grad=1e-2)
    assert not report.passed


def test_gradient_check_zero_trials_vacuous():
    report = gradient_check(n_trials=0)
    assert report.passed
    assert "vacuous" in report.warning


def test_full_batch_descent_on_separable_fixture():
    # two examples separated by their expert features
    seq = np.zeros((2, 12, 3))
    expert = np.array([[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]])
    targets = np.array([1.0, 0.0])
    model = tiny_model()
    losses = []
    for _ in range(50):
        loss, grads = loss_and_grad_arrays(model, seq, expert, targets)
        losses.append(loss)
        for name in model.params:
            model.params[name] -= 0.01 * grads[name]
    final, _ = loss_and_grad_arrays(model, seq, expert, targets)
    losses.append(final)
    assert all(b < a for a, b in zip(losses, losses[1:]))


# --- optimizer -----------------------------------------------------------

def test_adam_first_step_closed_form():
    params = {"w": np.array([1.0])}
    grads = {"w": np.array([1.0])}
    params, state = adam_step(params, grads, None, lr=0.001)
    expected = 1.0 - 0.001 / (1.0 + 1e-8)
    assert params["w"][0] == pytest.approx(expected, abs=1e-15)
    assert state["t"] == 1


def test_adam_zero_gradient_no_change():
    params = {"w": np.array([0.7, -0.3])}
    before = params["w"].copy()
    params, _ = adam_step(params, {"w": np.zeros(2)}, None, lr=0.01)
    npt.assert_array_equal(params["w"], before)


def test_adam_equal_gradients_equal_updates():
    params = {"w": np.zeros(2)}
    params, _ = adam_step(params, {"w": np.array([0.3, 0.3])}, None, lr=0.01)
    assert params["w"][0] == params["w"][1]
    assert params["w"][0] != 0.0


def test_adam_rejects_non_finite_gradient():
    params = {"w": np.array([1.0])}
    with pytest.raises(NumericalError):
        adam_step(params, {"w": np.array([np.nan])}, None, lr=0.01)


# --- persistence ---------------------------------------------------------

def test_model_round_trip_scores_bit_identical(tmp_path):
    rng = np.random.default_rng(77)
    model = tiny_model()
    model.expert_stats = None
    model.calibrator = Calibrator(a=1.3, b=-0.2)
    model.training_provenance.append({"site": "t", "stage": "local_training"})
    path = tmp_path / "m.prskm"
    save_model(path, model)
    loaded = load_model(path)
    assert loaded.config == model.config
    assert loaded.calibrator == model.calibrator
    assert loaded.training_provenance == model.training_provenance
    for _ in range(100):
        ex = random_example(rng)
        assert forward(loaded, ex)[0] == forward(model, ex)[0]


def test_model_file_bad_magic(tmp_path):
    p = tmp_path / "bad.prskm"
    p.write_bytes(b"WRONG!" + b"\x00" * 32)
    with pytest.raises(DataError, match="not a model file"):
        load_model(p)


def test_schema_hash_mismatch_refused():
    model = tiny_model(schema_hash="aaaa")
    check_schema(model, "aaaa")
    from portrisk.errors import SchemaMismatchError
    with pytest.raises(SchemaMismatchError):
        check_schema(model, "bbbb")


def test_tensor_order_is_complete():
    model = tiny_model()
    assert set(TENSOR_ORDER) == set(model.params)


def test_soft_targets_validated():
    with pytest.raises(DataError):
        SoftTargets(values=np.array([0.5, 1.2]))
    st = SoftTargets(values=np.array([0.0, 1.0, 0.5]))
    assert len(st) == 3
