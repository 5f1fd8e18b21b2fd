# tests/test_model_trainer.py

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src import model_trainer
from src.config import METRICS_COLUMNS
from src.errors import ConfigurationError, ConsistencyError, ParameterError
from src.gradcheck import random_problem
from src.model_trainer import (
    AdaptConfig,
    MomentumState,
    TeacherModel,
    TrainConfig,
    _sharded_gradients,
    adapt,
    adapt_speakers,
    evaluate,
    loss_and_gradients,
    sgd_step,
    train,
)
from src.network import ModelConfig, ParamMask, forward, init_params
from src.synthetic_data import DatasetSpec, FrameDataset, generate_synthetic, generate_utterances, random_shift


def frozen_arrays(params, mask):
    return [a.copy() for g, _, a in params.named_arrays() if not mask.updates(g)]


def small_model(input_dim=8, hidden=12, layers=3, output=4, architecture="highway", seed=5):
    config = ModelConfig(input_dim, hidden, layers, output, architecture)
    return config, init_params(config, seed)


# === optimizer ===
def test_momentum_step_hand_example(highway_params):
    params = highway_params.map(np.ones_like)
    grads = highway_params.map(np.ones_like)
    state = MomentumState.zeros(params)
    params, state = sgd_step(params, grads, state, 0.1, 0.0, ParamMask.everything())
    for a in params.arrays():
        assert_allclose(a, 0.9, atol=1e-15)
    params, state = sgd_step(params, grads, state, 0.1, 0.9, ParamMask.everything())
    for a, v in zip(params.arrays(), state.velocity.arrays()):
        assert_allclose(a, 0.71, atol=1e-15)
        assert_allclose(v, -0.19, atol=1e-15)


def test_masked_groups_keep_values_and_zero_velocity(highway_params):
    mask = ParamMask.gates_only()
    grads = highway_params.map(np.ones_like)
    params, state = sgd_step(highway_params, grads, MomentumState.zeros(highway_params), 0.1, 0.9, mask)
    for (group, _, new), old, v in zip(params.named_arrays(), highway_params.arrays(), state.velocity.arrays()):
        if mask.updates(group):
            assert not np.array_equal(new, old)
        else:
            assert_array_equal(new, old)
            assert not v.any()


def test_sgd_step_rejects_mismatched_gradients(highway_params):
    _, other = small_model(input_dim=3)
    with pytest.raises(ConsistencyError):
        sgd_step(highway_params, other, MomentumState.zeros(highway_params), 0.1, 0.0, ParamMask.everything())


@pytest.mark.parametrize("objective", ["ce", "kd", "hybrid", "smbr_ce", "smbr_kl"])
def test_gate_only_updates_leave_other_groups_bitwise_unchanged(objective):
    config, params, features, labels, teacher, lattice, reference = random_problem(17)
    mask = ParamMask.gates_only()
    frozen = frozen_arrays(params, mask)
    state = MomentumState.zeros(params)
    for step in range(100):
        _, grads, _, _ = loss_and_gradients(
            params, config, features, objective, labels=labels, teacher_posteriors=teacher,
            lattice=lattice, reference=reference, q=0.3, p=0.2,
        )
        params, state = sgd_step(params, grads, state, 0.05, 0.0 if step == 0 else 0.9, mask)
    for before, after in zip(frozen, frozen_arrays(params, mask)):
        assert_array_equal(before, after)


def test_small_step_matches_first_order_prediction():
    config, params, features, labels, _, _, _ = random_problem(4)
    result, grads, _, _ = loss_and_gradients(params, config, features, "ce", labels=labels)
    lr = 1e-6
    stepped, _ = sgd_step(params, grads, MomentumState.zeros(params), lr, 0.0, ParamMask.everything())
    after, _, _, _ = loss_and_gradients(stepped, config, features, "ce", labels=labels)
    predicted = lr * sum(float(np.sum(g ** 2)) for g in grads.arrays())
    actual = result.value - after.value
    assert actual == pytest.approx(predicted, rel=0.05)


def test_kd_against_own_posteriors_has_zero_gradient():
    config, params, features, _, _, _, _ = random_problem(8)
    own = forward(params, config, features, 2.0).posteriors
    _, grads, _, _ = loss_and_gradients(params, config, features, "kd", teacher_posteriors=own, temperature=2.0)
    for g in grads.arrays():
        assert not g.any()


def test_sharded_gradients_match_single_shard():
    config, params, _, _, _, _, _ = random_problem(2)
    rng = np.random.default_rng(2)
    features = rng.standard_normal((12, config.input_dim))
    labels = rng.integers(0, config.output_dim, size=12)
    single_value, single = _sharded_gradients(params, config, features, "ce", labels, None, TrainConfig())
    sharded_value, sharded = _sharded_gradients(params, config, features, "ce", labels, None, TrainConfig(n_jobs=3))
    assert sharded_value == pytest.approx(single_value, abs=1e-12)
    for a, b in zip(single.arrays(), sharded.arrays()):
        assert_allclose(a, b, rtol=0, atol=1e-12)


# === training ===
def test_training_reaches_low_error_on_separable_data(toy_splits):
    config, params = small_model(hidden=16, layers=2)
    tcfg = TrainConfig(epochs=20, batch_size=8, learning_rate=0.1, seed=3)
    result = train(params, config, toy_splits["train"], tcfg)
    assert list(result.history["epoch"]) == list(range(21))
    assert result.history["loss"].iloc[-1] < result.history["loss"].iloc[0]
    assert evaluate(result.params, config, toy_splits["test"]).fer < 0.05


def test_training_is_deterministic(toy_splits):
    config, params = small_model(layers=4)
    tcfg = TrainConfig(epochs=2, batch_size=16, seed=9)
    a = train(params, config, toy_splits["train"], tcfg)
    b = train(params, config, toy_splits["train"], tcfg)
    assert a.params.identical_to(b.params)
    pd.testing.assert_frame_equal(a.history, b.history)


def test_metrics_csv_gets_one_row_per_epoch(toy_splits, tmp_path):
    config, params = small_model(layers=2)
    path = tmp_path / "metrics" / "train.csv"
    train(params, config, toy_splits["train"], TrainConfig(epochs=3), metrics_path=str(path))
    frame = pd.read_csv(path)
    assert list(frame.columns) == METRICS_COLUMNS
    assert list(frame["epoch"]) == [0, 1, 2, 3]


def test_on_epoch_end_adds_history_columns(toy_splits):
    config, params = small_model(layers=2)
    result = train(params, config, toy_splits["train"], TrainConfig(epochs=2),
                   on_epoch_end=lambda epoch, current: {"marker": epoch * 10})
    assert list(result.history["marker"]) == [0, 10, 20]


def test_distillation_uses_teacher_posteriors(toy_splits):
    teacher_config, teacher_params = small_model(hidden=16, layers=2, seed=1)
    teacher = TeacherModel(train(teacher_params, teacher_config, toy_splits["train"], TrainConfig(epochs=5)).params,
                           teacher_config)
    config, params = small_model(hidden=6, layers=4, seed=2)
    result = train(params, config, toy_splits["train"], TrainConfig(objective="hybrid", q=0.5, temperature=2.0,
                                                                   epochs=3), teacher=teacher)
    assert result.history["loss"].iloc[-1] < result.history["loss"].iloc[0]


def test_gate_only_sequence_training_does_not_lower_expected_accuracy(toy_splits):
    config, params = small_model()
    utterances = generate_utterances(toy_splits["train"], 6, 8, 4, seed=3)
    tcfg = TrainConfig(objective="smbr_ce", p=0.0, learning_rate=1e-3, epochs=4, mask=ParamMask.gates_only())
    result = train(params, config, None, tcfg, utterances=utterances)
    history = result.history
    assert history["expected_accuracy"].iloc[-1] >= history["expected_accuracy"].iloc[0] - 1e-12
    for before, after in zip(frozen_arrays(params, tcfg.mask), frozen_arrays(result.params, tcfg.mask)):
        assert_array_equal(before, after)


def test_sequence_training_raises_expected_accuracy_every_epoch():
    data = generate_synthetic(DatasetSpec(num_classes=4, feature_dim=8, frames_per_class=100, separation=2.0, seed=7))
    config, params = small_model()
    params = train(params, config, data, TrainConfig(epochs=5, seed=7)).params
    utterances = generate_utterances(data, 20, 10, 4, seed=7, confusion=4, rejoin=True)
    tcfg = TrainConfig(objective="smbr_ce", p=0.2, learning_rate=1e-3, epochs=4, seed=7)
    expected = train(params, config, None, tcfg, utterances=utterances).history["expected_accuracy"].to_numpy()
    assert len(expected) == 5
    assert expected[0] < 0.95
    assert np.all(np.diff(expected) >= -1e-9)
    assert expected[-1] > expected[0]


# === requirements ===
def test_objective_requirements(toy_splits):
    config, params = small_model()
    plain_config, plain_params = small_model(architecture="plain_dnn")
    data = toy_splits["train"]
    teacher = TeacherModel(params, config)
    utterances = generate_utterances(data, 2, 5, 4, seed=0)
    with pytest.raises(ConfigurationError):
        train(params, config, data, TrainConfig(objective="kd"))
    with pytest.raises(ConfigurationError):
        train(params, config, data, TrainConfig(objective="ce"), teacher=teacher)
    with pytest.raises(ConfigurationError):
        train(params, config, data, TrainConfig(objective="smbr_ce"))
    with pytest.raises(ConfigurationError):
        train(params, config, data, TrainConfig(objective="ce"), utterances=utterances)
    with pytest.raises(ConfigurationError):
        train(params, config, FrameDataset(data.features), TrainConfig(objective="ce"))
    with pytest.raises(ConfigurationError):
        train(plain_params, plain_config, data, TrainConfig(mask=ParamMask.gates_only()))
    with pytest.raises(ParameterError):
        train(params, config, data.subset(np.array([], dtype=np.int64)), TrainConfig())


@pytest.mark.parametrize("kwargs", [
    {"objective": "mse"}, {"learning_rate": 0.0}, {"temperature": -1.0}, {"epochs": 0}, {"q": -0.1},
])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_momentum_schedule():
    tcfg = TrainConfig()
    assert tcfg.momentum_for(1) == 0.0
    assert tcfg.momentum_for(2) == tcfg.momentum_for(7) == 0.9


# === evaluation ===
def test_frame_error_rate(monkeypatch):
    config, params = small_model(input_dim=2)
    posteriors = np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4], [0.1, 0.9], [0.55, 0.45]])
    monkeypatch.setattr(model_trainer, "_posteriors", lambda *args, **kwargs: posteriors)
    data = FrameDataset(np.zeros((5, 2)), np.array([0, 1, 1, 1, 1]))
    assert evaluate(params, config, data).fer == pytest.approx(0.4)

    monkeypatch.setattr(model_trainer, "_posteriors", lambda *args, **kwargs: posteriors[:4])
    data = FrameDataset(np.zeros((4, 2)), np.array([1, 0, 1, 1]))
    result = evaluate(params, config, data)
    assert result.fer == pytest.approx(0.75)
    assert result.frames == 4

    perfect = np.eye(2)[[0, 1, 1]] * 0.8 + 0.1
    monkeypatch.setattr(model_trainer, "_posteriors", lambda *args, **kwargs: perfect)
    assert evaluate(params, config, FrameDataset(np.zeros((3, 2)), np.array([0, 1, 1]))).fer == 0.0


def test_evaluate_needs_labelled_frames():
    config, params = small_model(input_dim=2)
    with pytest.raises(ParameterError):
        evaluate(params, config, FrameDataset(np.zeros((3, 2))))
    with pytest.raises(ParameterError):
        evaluate(params, config, FrameDataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64)))


# === adaptation ===
def test_gate_only_adaptation_touches_only_gates(toy_splits):
    config, params = small_model()
    acfg = AdaptConfig(epochs=2, batch_size=4, learning_rate=0.01)
    result = adapt(params, config, toy_splits["adapt"], acfg)
    for before, after in zip(frozen_arrays(params, acfg.mask), frozen_arrays(result.params, acfg.mask)):
        assert_array_equal(before, after)
    assert not np.array_equal(result.params.transform_gate, params.transform_gate)
    assert "true_fer" in result.history.columns
    expected_labels = np.argmax(model_trainer._posteriors(params, config, toy_splits["adapt"].features), axis=1)
    assert_array_equal(result.labels, expected_labels)


def test_oracle_labels_come_from_the_data(toy_splits):
    config, params = small_model()
    acfg = AdaptConfig(label_source="oracle_hard", epochs=1, batch_size=8, mask=ParamMask.everything())
    result = adapt(params, config, toy_splits["adapt"], acfg)
    assert_array_equal(result.labels, toy_splits["adapt"].labels)


def test_self_labelled_adaptation_never_raises_its_loss(toy_splits):
    config, params = small_model()
    params = train(params, config, toy_splits["train"], TrainConfig(epochs=5)).params
    result = adapt(params, config, toy_splits["adapt"], AdaptConfig(epochs=5))
    loss = result.history["loss"].to_numpy()
    assert len(loss) == 6
    assert np.all(np.diff(loss) <= 1e-12)
    assert loss[-1] < loss[0]


@pytest.mark.slow
def test_oracle_adaptation_does_not_hurt_a_shifted_speaker():
    no_worse = 0
    for seed in range(5):
        data = generate_synthetic(DatasetSpec(num_classes=4, feature_dim=8, frames_per_class=100,
                                              adapt_frames_per_class=500, shift=random_shift(8, 4.0, seed + 1),
                                              seed=seed))
        adapt_part, held_out = data.speaker(1).split(0.5, seed)
        config, params = small_model(hidden=16, layers=4, seed=seed)
        params = train(params, config, data.speaker(0), TrainConfig(epochs=10, seed=seed)).params
        result = adapt(params, config, adapt_part, AdaptConfig(label_source="oracle_hard", seed=seed))
        no_worse += evaluate(result.params, config, held_out).fer <= evaluate(params, config, held_out).fer
    assert no_worse >= 4


def test_adaptation_requirements(toy_splits):
    config, params = small_model()
    plain_config, plain_params = small_model(architecture="plain_dnn")
    with pytest.raises(ConfigurationError):
        adapt(plain_params, plain_config, toy_splits["adapt"], AdaptConfig())
    with pytest.raises(ConfigurationError):
        adapt(params, config, toy_splits["adapt"], AdaptConfig(label_source="soft_teacher"))
    with pytest.raises(ConfigurationError):
        adapt(params, config, FrameDataset(toy_splits["adapt"].features), AdaptConfig(label_source="oracle_hard"))
    with pytest.raises(ConfigurationError):
        AdaptConfig(label_source="transcripts")


def test_speakers_adapt_independently(toy_splits):
    config, params = small_model()
    acfg = AdaptConfig(epochs=1, batch_size=8, learning_rate=0.01)
    speakers = {"a": toy_splits["adapt"], "b": toy_splits["test"]}
    serial = adapt_speakers(params, config, speakers, acfg, n_jobs=1)
    threaded = adapt_speakers(params, config, speakers, acfg, n_jobs=2)
    assert sorted(serial) == ["a", "b"]
    for name in serial:
        assert serial[name].params.identical_to(threaded[name].params)
    alone = adapt(params, config, speakers["b"], acfg)
    assert alone.params.identical_to(serial["b"].params)
