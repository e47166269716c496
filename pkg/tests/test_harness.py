import numpy as np
import pytest

from debias.core import DatasetCollection, SourceDataset
from debias.errors import ConfigError, MisalignedWeights, MissingField
from debias.harness import (
    GaussianFeatures,
    LinearModel,
    ScenarioConfig,
    TrainConfig,
    compare,
    evaluate,
    example_losses,
    train,
    weighted_loss,
    weighted_loss_grad,
    weighted_risk,
)
from debias.solver import SolverConfig
from debias.weights import WeightVector, compute_pi


def _data(X, y, M=None):
    return DatasetCollection([SourceDataset(0, ids=np.arange(len(y)), labels=np.asarray(y), features=X)], M=M)


def _gaussian(n_per=50, M=3, seed=0):
    return GaussianFeatures(M=M, d=4, separation=2.0).balanced_test(n_per, seed)


# --------------------------------------------------------------------------
# loss and gradient


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(5):
        M, d, n = 4, 3, 12
        model = LinearModel(rng.normal(size=(M, d)), rng.normal(size=M))
        X, y, c = rng.normal(size=(n, d)), rng.integers(0, M, n), rng.uniform(0.1, 2, n)
        gW, gb = weighted_loss_grad(model, X, y, c, l2=0.3)
        h = 1e-6
        fd_W = np.zeros_like(gW)
        for i in np.ndindex(gW.shape):
            up, dn = model.weights.copy(), model.weights.copy()
            up[i] += h
            dn[i] -= h
            fd_W[i] = (
                weighted_loss(LinearModel(up, model.bias), X, y, c, 0.3)
                - weighted_loss(LinearModel(dn, model.bias), X, y, c, 0.3)
            ) / (2 * h)
        fd_b = np.zeros_like(gb)
        for j in range(M):
            e = np.zeros(M)
            e[j] = h
            fd_b[j] = (
                weighted_loss(LinearModel(model.weights, model.bias + e), X, y, c, 0.3)
                - weighted_loss(LinearModel(model.weights, model.bias - e), X, y, c, 0.3)
            ) / (2 * h)
        g = np.concatenate([gW.ravel(), gb])
        fd = np.concatenate([fd_W.ravel(), fd_b])
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(g)


def test_losses_stable_for_large_logits():
    model = LinearModel(np.array([[1000.0], [-1000.0]]), np.zeros(2))
    loss = example_losses(model, np.array([[1.0]]), np.array([1]))
    assert np.isfinite(loss).all() and loss[0] == pytest.approx(2000.0)


# --------------------------------------------------------------------------
# training


def test_uniform_weights_equal_plain_erm_bit_for_bit():
    data = _gaussian()
    cfg = TrainConfig(epochs=3, batch_size=16, seed=4)
    a = train(data, cfg)
    b = train(data, cfg, WeightVector.uniform(data.n))
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)


@pytest.mark.parametrize("weight_use", ["loss", "resample"])
def test_separable_toy_is_fit(weight_use):
    X = np.array([[-2.0], [-1.5], [-1.0], [1.0], [1.5], [2.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    data = _data(X, y)
    pi = WeightVector(np.array([0.3, 0.1, 0.1, 0.1, 0.1, 0.3]), np.ones(6))
    for w in (None, pi):
        model = train(data, TrainConfig(epochs=50, batch_size=2, l2_penalty=0.0, weight_use=weight_use), w)
        assert evaluate(model, data)["accuracy"] == 1.0


def test_full_batch_loss_non_increasing():
    data = _gaussian(n_per=30)
    losses = []
    for epochs in range(1, 16):
        model = train(data, TrainConfig(epochs=epochs, batch_size=data.n, learning_rate=0.05, momentum=0.0))
        losses.append(weighted_loss(model, data.features, data.labels, np.ones(data.n), 1e-4))
    assert np.all(np.diff(losses) <= 1e-9)


def test_training_is_seeded():
    data = _gaussian()
    a = train(data, TrainConfig(epochs=2, seed=1))
    b = train(data, TrainConfig(epochs=2, seed=1))
    assert np.array_equal(a.weights, b.weights)


def test_train_errors():
    data = _gaussian()
    with pytest.raises(MisalignedWeights):
        train(data, TrainConfig(epochs=1), WeightVector.uniform(data.n - 1))
    with pytest.raises(MissingField):
        train(DatasetCollection([SourceDataset(0, ids=np.arange(2), labels=np.zeros(2))]), TrainConfig())
    with pytest.raises(ConfigError):
        TrainConfig(weight_use="both")
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)


# --------------------------------------------------------------------------
# evaluation


def test_perfect_and_constant_models():
    M = 4
    X = np.eye(M)
    data = _data(np.repeat(X, 3, axis=0), np.repeat(np.arange(M), 3))
    assert evaluate(LinearModel(np.eye(M), np.zeros(M)), data)["accuracy"] == 1.0
    const = evaluate(LinearModel(np.zeros((M, M)), np.array([0.0, 1.0, 0.0, 0.0])), data)
    assert const["accuracy"] == pytest.approx(1 / M)
    assert const["per_class_accuracy"] == {0: 0.0, 1: 1.0, 2: 0.0, 3: 0.0}


def test_risk_is_direct_average_and_matches_uniform_weighted_risk():
    rng = np.random.default_rng(2)
    data = _gaussian()
    model = LinearModel(rng.normal(size=(3, 4)), rng.normal(size=3))
    direct = np.mean([example_losses(model, data.features[i : i + 1], data.labels[i : i + 1])[0] for i in range(data.n)])
    risk = evaluate(model, data)["risk"]
    assert risk == pytest.approx(direct, abs=1e-12)
    assert weighted_risk(model, data, WeightVector.uniform(data.n)) == pytest.approx(risk, abs=1e-12)


# --------------------------------------------------------------------------
# scenario


def test_single_unbiased_source_gives_identical_models():
    feats = GaussianFeatures(M=3, d=4)
    data = feats.balanced_test(40, seed=1)
    test = feats.balanced_test(40, seed=2)
    pi = compute_pi(np.ones((data.n, 1)), [1.0], [1.0])
    cfg = TrainConfig(epochs=3)
    assert evaluate(train(data, cfg), test) == evaluate(train(data, cfg, pi), test)


def test_compare_report_fields():
    cfg = ScenarioConfig(n_total=500, pool_per_class=100, test_per_class=50, train=TrainConfig(epochs=2))
    rep = compare(cfg)
    for key in ("naive_acc", "debiased_acc", "gini", "l2_to_uniform", "tv_to_uniform", "W_hat", "connected"):
        assert key in rep
    assert rep["connected"] and sum(rep["n_k"]) == 500
    assert compare(cfg) == rep


def test_scenario_config_round_trip():
    cfg = ScenarioConfig(alpha=0.75, K=5, solver=SolverConfig.minibatch(seed=3))
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        GaussianFeatures(M=20, d=16).means()
