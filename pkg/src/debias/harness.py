"""Weighted empirical risk minimization with a multinomial logistic model.

``compare`` runs the full pipeline on Gaussian class-conditional features:
generate biased sources, estimate omega from class counts, solve for the
normalizers, then train a naive (uniform weights) and a debiased model on the
same seed and score both on a balanced test set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import DatasetCollection, SourceDataset, build_omega_matrix
from .errors import ConfigError, MisalignedWeights, MissingField
from .estimators import estimate_class_counts
from .generators import (
    ClassImbalanceConfig,
    balanced_sizes,
    gen_class_imbalance,
    long_tail_sizes,
)
from .seeding import stream
from .solver import SolverConfig, diagnose, solve
from .weights import (
    WeightVector,
    compute_pi,
    debiased_distribution,
    gini,
    l2_to_reference,
    total_variation,
)


@dataclass
class LinearModel:
    weights: np.ndarray  # (M, d)
    bias: np.ndarray  # (M,)

    def logits(self, X):
        return X @ self.weights.T + self.bias

    def predict(self, X):
        return self.logits(X).argmax(axis=1)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 100
    learning_rate: float = 0.1
    momentum: float = 0.9
    l2_penalty: float = 1e-4
    seed: int = 0
    weight_use: str = "loss"  # "loss" or "resample"

    def __post_init__(self):
        if self.weight_use not in ("loss", "resample"):
            raise ConfigError(f"unknown weight_use {self.weight_use!r}")
        if not (self.learning_rate > 0 and self.epochs >= 1 and self.batch_size >= 1):
            raise ConfigError("epochs, batch_size and learning_rate must be positive")
        if not (self.l2_penalty >= 0 and 0 <= self.momentum < 1):
            raise ConfigError("l2_penalty must be >= 0 and momentum in [0, 1)")


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def example_losses(model: LinearModel, X, y) -> np.ndarray:
    """Per-example softmax cross-entropy."""
    return -_log_softmax(model.logits(X))[np.arange(len(y)), y]


def weighted_loss(model: LinearModel, X, y, c, l2: float = 0.0) -> float:
    """``mean(c * loss) + l2/2 * |weights|^2``."""
    return float(np.mean(c * example_losses(model, X, y)) + 0.5 * l2 * np.sum(model.weights**2))


def weighted_loss_grad(model: LinearModel, X, y, c, l2: float = 0.0):
    """Gradient of :func:`weighted_loss` in ``(weights, bias)``."""
    p = np.exp(_log_softmax(model.logits(X)))
    p[np.arange(len(y)), y] -= 1.0
    r = p * (c / len(y))[:, None]
    return r.T @ X + l2 * model.weights, r.sum(axis=0)


def _check_train_data(data: DatasetCollection):
    if data.features is None:
        raise MissingField("training needs features")
    if np.any(data.labels < 0):
        raise MissingField("training needs labels")


def train(data: DatasetCollection, cfg: TrainConfig, weights: WeightVector | None = None) -> LinearModel:
    """Minimize the ``pi``-weighted cross-entropy by minibatch momentum SGD.

    ``weights=None`` is plain ERM and is run as ``pi = 1/n`` through the same
    code path.  With ``weight_use="loss"`` each example's loss is scaled by
    ``n * pi``; with ``"resample"`` each epoch draws ``n`` rows with
    probabilities ``pi`` and averages their losses.
    """
    _check_train_data(data)
    X, y = data.features, data.labels
    n, d = X.shape
    M = data.M
    pi = np.full(n, 1.0 / n) if weights is None else np.asarray(weights.pi, dtype=float)
    if pi.shape != (n,):
        raise MisalignedWeights(f"{pi.size} weights for {n} observations")

    rng = stream(cfg.seed, 0)
    model = LinearModel(np.zeros((M, d)), np.zeros(M))
    vW, vb = np.zeros_like(model.weights), np.zeros_like(model.bias)
    scale = n * pi
    b = min(cfg.batch_size, n)
    for _ in range(cfg.epochs):
        if cfg.weight_use == "loss":
            order = rng.permutation(n)
            c_all = scale[order]
        else:
            order = rng.choice(n, size=n, p=pi / pi.sum())
            c_all = np.ones(n)
        for start in range(0, n, b):
            idx = order[start : start + b]
            gW, gb = weighted_loss_grad(model, X[idx], y[idx], c_all[start : start + b], cfg.l2_penalty)
            vW = cfg.momentum * vW + gW
            vb = cfg.momentum * vb + gb
            model.weights = model.weights - cfg.learning_rate * vW
            model.bias = model.bias - cfg.learning_rate * vb
    return model


def evaluate(model: LinearModel, test: DatasetCollection) -> dict:
    """Top-1 accuracy, per-class accuracy and mean cross-entropy."""
    _check_train_data(test)
    X, y = test.features, test.labels
    pred = model.predict(X)
    per_class = {}
    for c in range(test.M):
        m = y == c
        if m.any():
            per_class[c] = float(np.mean(pred[m] == c))
    return {
        "accuracy": float(np.mean(pred == y)),
        "per_class_accuracy": per_class,
        "risk": float(np.mean(example_losses(model, X, y))),
    }


def weighted_risk(model: LinearModel, data: DatasetCollection, weights: WeightVector) -> float:
    """``sum_i pi_i loss_i``."""
    return float(weights.pi @ example_losses(model, data.features, data.labels))


# --------------------------------------------------------------------------
# Gaussian feature scenario


@dataclass(frozen=True)
class GaussianFeatures:
    """Class ``y`` is ``N(separation * e_y, I_d)``; needs ``M <= d``."""

    M: int = 10
    d: int = 16
    separation: float = 3.0

    def means(self) -> np.ndarray:
        if self.M > self.d:
            raise ConfigError(f"need d >= M, got d={self.d}, M={self.M}")
        return self.separation * np.eye(self.M, self.d)

    def sample(self, labels, rng) -> np.ndarray:
        labels = np.asarray(labels)
        return self.means()[labels] + rng.standard_normal((len(labels), self.d))

    def pool(self, per_class: int, seed: int) -> dict[int, SourceDataset]:
        out = {}
        for y in range(self.M):
            rng = stream(seed, 1, y)
            labels = np.full(per_class, y)
            out[y] = SourceDataset(
                index=0,
                ids=y * per_class + np.arange(per_class),
                labels=labels,
                features=self.sample(labels, rng),
            )
        return out

    def balanced_test(self, per_class: int, seed: int) -> DatasetCollection:
        labels = np.repeat(np.arange(self.M), per_class)
        X = self.sample(labels, stream(seed, 2))
        src = SourceDataset(index=0, ids=np.arange(len(labels)), labels=labels, features=X)
        return DatasetCollection([src], M=self.M)


@dataclass(frozen=True)
class ScenarioConfig:
    """Class-imbalance sources over Gaussian features.

    Source sizes are ``n_total`` split evenly, or proportional to
    ``alpha**k`` when ``alpha`` is set.
    """

    M: int = 10
    K: int = 5
    gamma: float = 0.2
    n_total: int = 5000
    alpha: float | None = None
    d: int = 16
    separation: float = 3.0
    pool_per_class: int = 2000
    test_per_class: int = 500
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig.full)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        try:
            if "train" in d:
                d["train"] = TrainConfig(**d["train"])
            if "solver" in d:
                d["solver"] = SolverConfig.from_dict(d["solver"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["solver"] = self.solver.to_dict()
        return out

    def sizes(self):
        if self.alpha is None:
            return balanced_sizes(self.n_total, self.K)
        return long_tail_sizes(self.n_total, self.K, self.alpha)


def compare(cfg: ScenarioConfig) -> dict:
    """Naive vs debiased ERM on one generated scenario.

    Returns a flat report with both accuracies, the normalizer estimates,
    weight metrics (Gini, L2 distance to uniform, debiased label masses)
    and overlap diagnostics.
    """
    feats = GaussianFeatures(cfg.M, cfg.d, cfg.separation)
    pool = feats.pool(cfg.pool_per_class, cfg.seed)
    ci = ClassImbalanceConfig(M=cfg.M, K=cfg.K, gamma=cfg.gamma, n_k=tuple(cfg.sizes()), seed=cfg.seed)
    data, _ = gen_class_imbalance(ci, pool)
    specs = estimate_class_counts(data)
    om = build_omega_matrix(specs, data)
    res = solve(om, data.lam, cfg.solver)
    pi = compute_pi(om, data.lam, res.W_hat)
    diag = diagnose(om, data.lam, res.u_hat)

    test = feats.balanced_test(cfg.test_per_class, cfg.seed)
    naive = train(data, cfg.train)
    debiased = train(data, cfg.train, pi)
    ev_naive, ev_deb = evaluate(naive, test), evaluate(debiased, test)
    dist = debiased_distribution(pi, data, "label").dense(cfg.M)
    return {
        "seed": cfg.seed,
        "gamma": cfg.gamma,
        "n_k": data.n_k.tolist(),
        "naive_acc": ev_naive["accuracy"],
        "debiased_acc": ev_deb["accuracy"],
        "naive_per_class": ev_naive["per_class_accuracy"],
        "debiased_per_class": ev_deb["per_class_accuracy"],
        "gini": gini(pi),
        "l2_to_uniform": l2_to_reference(pi, np.full(data.n, 1.0 / data.n)),
        "tv_to_uniform": total_variation(dist, np.full(cfg.M, 1.0 / cfg.M)),
        "debiased_label_mass": dist.tolist(),
        "W_hat": res.W_hat.tolist(),
        "solver_converged": res.converged,
        "connected": diag.connected,
        "kappa_min": diag.kappa_min,
        "epsilon_hat": diag.epsilon_hat,
    }
