import functools
import json
import math

import numpy as np
import pytest

from agescreen.data import EmbeddingStore, split_view
from agescreen.losses import GapRule, HeadLossConfig
from agescreen.net import NetworkConfig, batch_predict, init_params, load_checkpoint, save_checkpoint
from agescreen.synth import synth_dataset
from agescreen.trainer import (
    DivergenceError,
    OptimizerConfig,
    TrainConfig,
    TrainReport,
    _Adam,
    _Sgd,
    evaluate_split,
    train,
)

THRESHOLDS = (12, 15, 18, 21)


def heads_for(thresholds=THRESHOLDS, alpha_mode="off", gap=None):
    gap = gap if gap is not None else GapRule.none()
    return tuple(
        HeadLossConfig(threshold=t, gamma=2.0, alpha_mode=alpha_mode, gap=gap)
        for t in thresholds
    )


@functools.lru_cache(maxsize=None)
def small_dataset():
    manifest, emb = synth_dataset(size=600, dim=8, noise=0.25, seed=7)
    return manifest, EmbeddingStore(data=emb)


def small_net():
    return NetworkConfig(dim=8, variant="WS", thresholds=THRESHOLDS)


def quick_config(**overrides):
    base = dict(
        head_configs=heads_for(),
        head_weights=(1.0, 1.0, 1.0, 1.0, 1.0),
        epochs=3,
        batch_size=64,
        seed=11,
        optimizer=OptimizerConfig(name="adam", learning_rate=5e-3),
    )
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------- optimizers

def test_sgd_momentum_matches_hand_computed_steps():
    cfg = OptimizerConfig(name="sgd", learning_rate=0.1, momentum=0.5)
    tensors = {"p": np.array([1.0, 2.0])}
    opt = _Sgd(cfg, tensors)
    opt.step(tensors, {"p": np.array([1.0, -2.0])})
    # v = [1, -2], p = [1, 2] - 0.1 * v
    assert np.allclose(tensors["p"], [0.9, 2.2], rtol=0, atol=1e-15)
    opt.step(tensors, {"p": np.array([0.5, 0.5])})
    # v = 0.5 * [1, -2] + [0.5, 0.5] = [1.0, -0.5]
    assert np.allclose(tensors["p"], [0.8, 2.25], rtol=0, atol=1e-15)


def test_sgd_zero_momentum_is_plain_descent():
    cfg = OptimizerConfig(name="sgd", learning_rate=0.2, momentum=0.0)
    tensors = {"p": np.array([3.0])}
    opt = _Sgd(cfg, tensors)
    opt.step(tensors, {"p": np.array([1.5])})
    opt.step(tensors, {"p": np.array([-1.0])})
    assert np.allclose(tensors["p"], [3.0 - 0.2 * 1.5 + 0.2 * 1.0], atol=1e-15)


def test_adam_matches_hand_computed_steps():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    cfg = OptimizerConfig(name="adam", learning_rate=lr, beta1=b1, beta2=b2, epsilon=eps)
    tensors = {"p": np.array([1.0])}
    opt = _Adam(cfg, tensors)

    g1 = 2.0
    opt.step(tensors, {"p": np.array([g1])})
    m = (1 - b1) * g1
    v = (1 - b2) * g1 * g1
    p1 = 1.0 - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
    assert tensors["p"][0] == pytest.approx(p1, rel=1e-14)

    g2 = -1.0
    opt.step(tensors, {"p": np.array([g2])})
    m = b1 * m + (1 - b1) * g2
    v = b2 * v + (1 - b2) * g2 * g2
    p2 = p1 - lr * (m / (1 - b1**2)) / (math.sqrt(v / (1 - b2**2)) + eps)
    assert tensors["p"][0] == pytest.approx(p2, rel=1e-14)


def test_adam_step_count_is_shared_across_tensors():
    cfg = OptimizerConfig(name="adam", learning_rate=0.1)
    tensors = {"a": np.ones(2), "b": np.ones(3)}
    opt = _Adam(cfg, tensors)
    opt.step(tensors, {"a": np.ones(2), "b": np.ones(3)})
    assert opt.t == 1
    opt.step(tensors, {"a": np.ones(2), "b": np.ones(3)})
    assert opt.t == 2
    # with constant unit gradients both arms see the same update size
    assert np.allclose(tensors["a"], tensors["a"][0])
    assert np.allclose(tensors["b"], tensors["a"][0])


@pytest.mark.parametrize(
    "kwargs",
    [
        {"name": "rmsprop"},
        {"learning_rate": 0.0},
        {"learning_rate": -1.0},
        {"momentum": 1.0},
        {"beta1": 1.0},
        {"beta2": -0.1},
        {"epsilon": 0.0},
    ],
)
def test_optimizer_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        OptimizerConfig(**kwargs)


# --------------------------------------------------------------- validation

def test_train_config_requires_matching_weight_count():
    with pytest.raises(ValueError, match="head weights"):
        TrainConfig(head_configs=heads_for(), head_weights=(1.0, 1.0))


@pytest.mark.parametrize(
    "overrides",
    [
        {"epochs": 0},
        {"batch_size": 0},
        {"selection_metric": "train_loss"},
        {"head_weights": (1.0, 1.0, 1.0, 1.0, -0.5)},
    ],
)
def test_train_config_rejects_bad_values(overrides):
    with pytest.raises(ValueError):
        quick_config(**overrides)


def test_train_rejects_threshold_mismatch():
    manifest, store = small_dataset()
    net = NetworkConfig(dim=8, variant="WS", thresholds=(12, 18))
    with pytest.raises(ValueError, match="must match"):
        train(manifest, store, net, quick_config())


# ----------------------------------------------------------------- training

def test_train_is_deterministic_given_seed():
    manifest, store = small_dataset()
    p1, r1 = train(manifest, store, small_net(), quick_config())
    p2, r2 = train(manifest, store, small_net(), quick_config())
    assert r1 == r2
    for name in p1.names():
        assert np.array_equal(p1.tensors[name], p2.tensors[name])


def test_train_seed_changes_the_result():
    manifest, store = small_dataset()
    p1, _ = train(manifest, store, small_net(), quick_config(seed=11))
    p2, _ = train(manifest, store, small_net(), quick_config(seed=12))
    assert any(not np.array_equal(p1.tensors[n], p2.tensors[n]) for n in p1.names())


def test_train_loss_decreases_on_learnable_data():
    manifest, store = small_dataset()
    _, report = train(manifest, store, small_net(), quick_config(epochs=8))
    losses = [e.train_loss for e in report.epochs]
    assert losses[-1] < losses[0]
    maes = [e.val_mae for e in report.epochs]
    assert min(maes) < maes[0]


def test_best_epoch_is_earliest_argmin_of_selection():
    manifest, store = small_dataset()
    _, report = train(manifest, store, small_net(), quick_config(epochs=5))
    maes = [e.val_mae for e in report.epochs]
    assert report.best_epoch == int(np.argmin(maes)) + 1
    assert report.selection_metric == "val_mae"


def test_val_loss_selection_uses_val_loss():
    manifest, store = small_dataset()
    _, report = train(
        manifest, store, small_net(), quick_config(epochs=5, selection_metric="val_total_loss")
    )
    losses = [e.val_loss for e in report.epochs]
    assert report.best_epoch == int(np.argmin(losses)) + 1


def test_returned_params_are_float32_exact():
    manifest, store = small_dataset()
    params, _ = train(manifest, store, small_net(), quick_config())
    for name in params.names():
        t = params.tensors[name]
        assert np.array_equal(t, t.astype(np.float32).astype(np.float64))


def test_trained_checkpoint_round_trips_bit_exact(tmp_path):
    manifest, store = small_dataset()
    net = small_net()
    params, _ = train(manifest, store, net, quick_config())
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, net)
    loaded_params, loaded_net = load_checkpoint(path)
    assert loaded_net == net
    for name in params.names():
        assert np.array_equal(params.tensors[name], loaded_params.tensors[name])


def test_resampling_path_is_deterministic_and_distinct():
    manifest, store = small_dataset()
    p1, r1 = train(manifest, store, small_net(), quick_config(resampling=True))
    p2, r2 = train(manifest, store, small_net(), quick_config(resampling=True))
    p3, _ = train(manifest, store, small_net(), quick_config(resampling=False))
    assert r1 == r2
    for name in p1.names():
        assert np.array_equal(p1.tensors[name], p2.tensors[name])
    assert any(not np.array_equal(p1.tensors[n], p3.tensors[n]) for n in p1.names())


def test_imbalance_alpha_heads_train():
    manifest, store = small_dataset()
    cfg = quick_config(head_configs=heads_for(alpha_mode="imbalance"), epochs=2)
    _, report = train(manifest, store, small_net(), cfg)
    assert len(report.epochs) == 2
    assert all(math.isfinite(e.train_loss) for e in report.epochs)


def test_gap_heads_train():
    manifest, store = small_dataset()
    cfg = quick_config(head_configs=heads_for(gap=GapRule.relative()), epochs=2)
    _, report = train(manifest, store, small_net(), cfg)
    assert len(report.epochs) == 2


def test_divergence_raises_with_location():
    manifest, store = small_dataset()
    cfg = quick_config(
        optimizer=OptimizerConfig(name="sgd", learning_rate=1e200, momentum=0.0),
        batch_size=32,
    )
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError) as err:
            train(manifest, store, small_net(), cfg)
    assert err.value.epoch == 1
    assert err.value.batch >= 2


def test_train_requires_both_splits():
    manifest, emb = synth_dataset(size=40, dim=8, seed=3, split_fracs=(1.0, 0.0, 0.0))
    with pytest.raises(ValueError, match="non-empty"):
        train(manifest, EmbeddingStore(data=emb), small_net(), quick_config())


def test_report_json_round_trip():
    manifest, store = small_dataset()
    _, report = train(manifest, store, small_net(), quick_config(epochs=2))
    blob = json.dumps(report.to_dict())
    assert TrainReport.from_dict(json.loads(blob)) == report


# --------------------------------------------------------------- evaluation

def test_evaluate_split_matches_batch_predict():
    manifest, store = small_dataset()
    net = small_net()
    params = init_params(net, 5)
    samples = split_view(manifest, "test")
    rows = evaluate_split(params, net, samples, store)
    z = store.matrix([s.embedding_index for s in samples])
    estimates, scores = batch_predict(params, net, z)
    assert [r.id for r in rows] == [s.id for s in samples]
    for i, row in enumerate(rows):
        assert row.age == samples[i].age
        assert row.age_estimate == pytest.approx(float(estimates[i]), abs=0)
        for j, t in enumerate(net.thresholds):
            assert row.scores[t] == pytest.approx(float(scores[i, j]), abs=0)


def test_evaluate_split_score_from_age_uses_threshold_minus_estimate():
    manifest, store = small_dataset()
    net = small_net()
    params = init_params(net, 5)
    samples = split_view(manifest, "val")[:10]
    rows = evaluate_split(params, net, samples, store, score_from_age=True)
    for row in rows:
        for t in net.thresholds:
            assert row.scores[t] == pytest.approx(t - row.age_estimate, abs=1e-12)


def test_evaluate_split_empty_is_empty():
    manifest, store = small_dataset()
    net = small_net()
    params = init_params(net, 5)
    assert evaluate_split(params, net, [], store) == []
