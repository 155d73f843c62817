import json
import math

import numpy as np
import pytest

from mmnet import model as M
from mmnet.errors import ConfigError, ContractError, StratificationError
from mmnet.synthetic import Dataset, separable_embeddings
from mmnet.tensor import Rng
from mmnet.training import (
    TrainConfig,
    cross_entropy,
    gradient_check,
    head_backward,
    lr_sweep,
    scaled_learning_rate,
    sgd_step,
    sweep_grid,
    train_head,
    trainable_head_params,
)
from mmnet.weights import WeightStore


def micro_head(seed=0, dropout=0.5):
    spec = M.head_only_spec("reduced", 3, in_features=16, hidden=8, dropout=dropout)
    w = M.init_weights(spec, seed, np.float64)
    rng = np.random.default_rng(seed)
    for name in w.names():
        if name.endswith("/gamma"):
            w[name][...] = rng.uniform(0.5, 1.5, w[name].shape)
        elif name.endswith("/beta"):
            w[name][...] = rng.normal(0, 0.2, w[name].shape)
    return spec, w


def embeddings(n_per=6, seed=1):
    ds = separable_embeddings(3, n_per, 16, seed=seed, spread=1.0)
    return ds.images.reshape(len(ds), 16).astype(np.float64), ds.labels


@pytest.mark.parametrize(
    "probs,labels,expected",
    [
        ([[0.0, 1.0, 0.0]], [1], 0.0),
        ([[0.5, 0.5], [0.5, 0.5]], [0, 1], math.log(2)),
        ([[0.2] * 5], [3], math.log(5)),
    ],
)
def test_cross_entropy_examples(probs, labels, expected):
    assert cross_entropy(np.array(probs), labels) == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_clamps_zero_probability():
    assert cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_bad_label():
    with pytest.raises(IndexError):
        cross_entropy(np.array([[0.5, 0.5]]), [2])


def test_bias_gradient_closed_form():
    spec = M.head_only_spec("baseline", 4, in_features=5)
    w = M.init_weights(spec, 0, np.float64)
    w["head/classifier/weights"][...] = 0
    w["head/classifier/bias"][...] = 0
    feats = np.random.default_rng(0).normal(size=(6, 5))
    labels = np.array([0, 1, 2, 3, 0, 0])
    g = head_backward(spec, w, feats, labels)
    onehot = np.eye(4)[labels]
    np.testing.assert_allclose(g["head/classifier/bias"], (0.25 - onehot).mean(0), atol=1e-15)


def test_dead_feature_has_zero_gradient():
    spec = M.head_only_spec("baseline", 3, in_features=4)
    w = M.init_weights(spec, 1, np.float64)
    feats = np.random.default_rng(1).normal(size=(5, 4))
    feats[:, 2] = 0.0
    g = head_backward(spec, w, feats, [0, 1, 2, 0, 1])
    assert np.all(g["head/classifier/weights"][2] == 0)
    assert np.any(g["head/classifier/weights"][0] != 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_finite_difference_agreement(seed):
    spec, w = micro_head(seed)
    feats, labels = embeddings(seed=seed + 10)
    errs = gradient_check(spec, w, feats, labels, h=1e-4, seed=seed)
    assert set(errs) == set(trainable_head_params(spec))
    kinds = {n.rsplit("/", 1)[1] for n in errs}
    assert kinds == {"weights", "bias", "gamma", "beta"}
    assert max(errs.values()) < 1e-4, errs


def test_shift_before_batchnorm_has_zero_gradient():
    spec, w = micro_head(0)
    feats, labels = embeddings()
    g = head_backward(spec, w, feats, labels, Rng(0))
    assert np.abs(g["head/fc1/bias"]).max() < 1e-14
    assert np.abs(g["head/bn1/beta"]).max() < 1e-14


def test_gradient_check_catches_a_wrong_gradient(monkeypatch):
    from mmnet import layers as L

    spec, w = micro_head(0, dropout=0.0)
    feats, labels = embeddings()
    real = L.activation_derivative
    monkeypatch.setattr(L, "activation_derivative", lambda kind, x: real(kind, x) * 1.1)
    errs = gradient_check(spec, w, feats, labels)
    assert max(errs.values()) > 1e-3


def test_frozen_parameter_gradient_is_refused():
    spec = M.build_model(3, "reduced", (32, 32, 3), width=0.25)
    w = M.init_weights(spec, 0)
    with pytest.raises(ContractError):
        head_backward(spec, w, np.zeros((2, 32, 32, 3), np.float32), [0, 1], Rng(0), params=["backbone/conv1/kernel"])
    with pytest.raises(ContractError):
        head_backward(spec, w, np.zeros((2, 32, 32, 3), np.float32), [0, 1], Rng(0), params=["head/bn1/running_mean"])


def test_sgd_examples():
    w = WeightStore({"p": np.array([1.0])})
    sgd_step(w, {"p": np.array([0.5])}, 0.1)
    assert w["p"][0] == pytest.approx(0.95)
    before = w["p"].copy()
    sgd_step(w, {"p": np.array([0.0])}, 0.1)
    assert w["p"].tobytes() == before.tobytes()
    with pytest.raises(KeyError):
        sgd_step(w, {"q": np.array([1.0])}, 0.1)


def test_sgd_momentum_accumulates():
    w = WeightStore({"p": np.array([0.0])})
    vel = {}
    sgd_step(w, {"p": np.array([1.0])}, 1.0, vel, 0.9)
    sgd_step(w, {"p": np.array([1.0])}, 1.0, vel, 0.9)
    assert w["p"][0] == pytest.approx(-(1 + 1.9))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)


def _embedding_setup(seed=0):
    ds = separable_embeddings(3, 30, 16, seed=seed)
    spec = M.head_only_spec("reduced", 3, in_features=16, hidden=8)
    return spec, M.init_weights(spec, seed), ds


def test_zero_learning_rate_keeps_trainable_weights():
    spec, w, ds = _embedding_setup()
    before = w.copy()
    train_head(spec, w, ds, TrainConfig(learning_rate=0.0, epochs=3, batch_size=16))
    for n in trainable_head_params(spec):
        assert w[n].tobytes() == before[n].tobytes()


def test_separable_three_class_reaches_full_accuracy():
    spec, w, ds = _embedding_setup()
    rep = train_head(spec, w, ds, TrainConfig(learning_rate=0.05, epochs=50, batch_size=16))
    assert len(rep.epochs) == 50
    assert rep.epochs[-1].train_accuracy == 1.0
    assert all(np.isfinite(rep.losses()))


def test_training_is_deterministic():
    spec, w1, ds = _embedding_setup(2)
    _, w2, _ = _embedding_setup(2)
    cfg = TrainConfig(learning_rate=0.05, epochs=5, batch_size=8, seed=9)
    a = train_head(spec, w1, ds, cfg)
    b = train_head(spec, w2, ds, cfg)
    assert a.losses() == b.losses()
    assert a.to_jsonl(include_timing=False) == b.to_jsonl(include_timing=False)
    assert w1.equals(w2)


def test_backbone_is_untouched():
    spec = M.build_model(2, "reduced", (32, 32, 3), width=0.25)
    w = M.init_weights(spec, 0)
    ds = Dataset(np.random.default_rng(0).random((8, 32, 32, 3)).astype(np.float32), [0, 1] * 4)
    before = {n: w[n].tobytes() for n in spec.param_names("backbone")}
    head_before = w["head/fc1/weights"].copy()
    train_head(spec, w, ds, TrainConfig(learning_rate=0.1, epochs=2, batch_size=4))
    assert all(w[n].tobytes() == b for n, b in before.items())
    assert not np.array_equal(head_before, w["head/fc1/weights"])


def test_empty_class_raises():
    spec, w, ds = _embedding_setup()
    keep = ds.labels != 1
    with pytest.raises(StratificationError, match="class_1"):
        train_head(spec, w, Dataset(ds.images[keep], ds.labels[keep], ds.class_names), TrainConfig(epochs=1))


def test_report_jsonl_and_checkpoints(tmp_path):
    spec, w, ds = _embedding_setup()
    cfg = TrainConfig(learning_rate=0.01, epochs=4, batch_size=16, checkpoint_every=2, checkpoint_dir=str(tmp_path / "ck"))
    rep = train_head(spec, w, ds, cfg, val=ds)
    lines = [json.loads(l) for l in rep.to_jsonl().splitlines()]
    assert lines[0]["kind"] == "config" and lines[0]["learning_rate"] == 0.01
    assert [l["epoch"] for l in lines[1:]] == [1, 2, 3, 4]
    assert all(l["val_accuracy"] is not None for l in lines[1:])
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["epoch_0002.mmnw", "epoch_0004.mmnw"]


def test_sweep_grid_and_table(caplog):
    grid = sweep_grid()
    assert grid == [0.1, 0.01, 0.001, 0.0001, 1e-05]
    spec, w, ds = _embedding_setup()
    cfg = TrainConfig(epochs=3, batch_size=16)
    rows = lr_sweep(spec, w, ds, grid + [0.01], cfg)
    assert [r[0] for r in rows] == grid
    assert "duplicate" in caplog.text
    assert max(acc for _, acc in rows) >= rows[0][1]


def test_scaled_learning_rate():
    assert scaled_learning_rate(29_970) == pytest.approx(1e-4)
    assert scaled_learning_rate(2_000) == pytest.approx(1e-4 * 29_970 / 2_000)
    assert scaled_learning_rate(1) == 1.0
