import math

import numpy as np
import pytest

from debias.core import DatasetCollection, SourceDataset, build_omega_matrix
from debias.errors import LengthMismatch, MissingKey, NonPositiveW
from debias.estimators import estimate_class_counts
from debias.generators import ClassImbalanceConfig, gen_class_imbalance
from debias.solver import SolverConfig, solve
from debias.weights import (
    WeightVector,
    compute_pi,
    debiased_distribution,
    gini,
    gini_naive,
    l2_to_reference,
    resample,
    total_variation,
)


def test_single_unbiased_source_is_uniform():
    pi = compute_pi(np.ones((9, 1)), [1.0], [1.0])
    assert np.all(pi.pi == 1 / 9)


def test_scaling_W_leaves_pi_unchanged():
    rng = np.random.default_rng(0)
    w = rng.uniform(0.1, 1, (30, 3))
    lam, W = np.array([0.2, 0.3, 0.5]), np.array([0.7, 1.3, 1.0])
    a = compute_pi(w, lam, W).pi
    for c in (1e-3, 2.0, 1e4):
        assert compute_pi(w, lam, c * W).pi == pytest.approx(a, rel=1e-12)


def test_two_point_weight_ratio_by_hand():
    # exact W = (1, 5.5), lambda = (1/2, 1/2); rows z=1 -> (1, 10), z=2 -> (1, 1)
    vals = np.array([[1.0, 10.0], [1.0, 1.0]])
    pi = compute_pi(vals, [0.5, 0.5], [1.0, 5.5])
    d1 = 0.5 * 1 / 1 + 0.5 * 10 / 5.5
    d2 = 0.5 * 1 / 1 + 0.5 * 1 / 5.5
    assert pi.unnormalized == pytest.approx([1 / d1, 1 / d2], rel=1e-15)
    assert pi.pi[0] / pi.pi[1] == pytest.approx(d2 / d1)


def test_non_positive_W():
    with pytest.raises(NonPositiveW):
        compute_pi(np.ones((2, 2)), [0.5, 0.5], [1.0, 0.0])


def test_max_weight_cap():
    raw = compute_pi(np.array([[1.0], [0.01]]), [1.0], [1.0])
    pi = compute_pi(np.array([[1.0], [0.01]]), [1.0], [1.0], max_weight=0.6)
    assert pi.pi.sum() == pytest.approx(1.0)
    # one cap then one renormalization
    assert pi.pi == pytest.approx(np.array([raw.pi[0], 0.6]) / (raw.pi[0] + 0.6))


def test_weight_csv_round_trip():
    pi = compute_pi(np.array([[1.0], [0.3], [0.7]]), [1.0], [1.0])
    text = pi.to_csv()
    assert text.splitlines()[0] == "source,obs,pi,unnormalized"
    back = WeightVector.from_csv(text)
    assert np.array_equal(back.pi, pi.pi) and np.array_equal(back.unnormalized, pi.unnormalized)


# --------------------------------------------------------------------------
# debiased distribution


def _balanced(M=4, per=5):
    labels = np.repeat(np.arange(M), per)
    return DatasetCollection([SourceDataset(0, ids=np.arange(len(labels)), labels=labels)], M=M)


def test_uniform_weights_on_balanced_data():
    data = _balanced()
    d = debiased_distribution(WeightVector.uniform(data.n), data)
    assert d.mass == pytest.approx((0.25,) * 4)


def test_single_source_counts_flatten_labels():
    labels = np.array([0, 0, 0, 1, 2, 2])
    data = DatasetCollection([SourceDataset(0, ids=np.arange(6), labels=labels)])
    om = build_omega_matrix(estimate_class_counts(data), data)
    pi = compute_pi(om, data.lam, solve(om, data.lam).W_hat)
    d = debiased_distribution(pi, data)
    # count estimates make every seen label equally likely under uniform test labels
    assert d.as_dict() == pytest.approx({0: 1 / 3, 1: 1 / 3, 2: 1 / 3})


def test_unbiased_single_source_matches_histogram():
    labels = np.array([0, 0, 0, 1, 2, 2])
    data = DatasetCollection([SourceDataset(0, ids=np.arange(6), labels=labels)])
    pi = compute_pi(np.ones((6, 1)), [1.0], [1.0])
    assert debiased_distribution(pi, data).as_dict() == pytest.approx({0: 0.5, 1: 1 / 6, 2: 1 / 3})


def test_distribution_errors_and_strata():
    data = _balanced()
    with pytest.raises(MissingKey):
        debiased_distribution(WeightVector.uniform(data.n), data, key="stratum")
    with pytest.raises(LengthMismatch):
        debiased_distribution(WeightVector.uniform(3), data)
    src = SourceDataset(0, ids=np.arange(4), labels=np.zeros(4), strata=np.array([1, 1, 2, 3]))
    d = debiased_distribution(WeightVector.uniform(4), DatasetCollection([src]), key="stratum")
    assert d.support == (1, 2, 3) and sum(d.mass) == pytest.approx(1.0)


def test_class_imbalance_recovers_uniform_labels():
    tv = []
    for seed in range(8):
        data, _ = gen_class_imbalance(ClassImbalanceConfig(n_k=(10_000,) * 5, gamma=0.2, seed=seed))
        om = build_omega_matrix(estimate_class_counts(data), data)
        pi = compute_pi(om, data.lam, solve(om, data.lam, SolverConfig.minibatch(seed=seed)).W_hat)
        tv.append(total_variation(debiased_distribution(pi, data).dense(10), np.full(10, 0.1)))
    assert np.median(tv) <= 0.05


# --------------------------------------------------------------------------
# Gini and distances


def test_gini_extremes():
    assert gini(np.full(10, 0.1)) == 0.0
    for n in (2, 5, 100):
        x = np.zeros(n)
        x[0] = 1.0
        assert gini(x) == pytest.approx((n - 1) / n)


def test_gini_matches_double_sum():
    rng = np.random.default_rng(1)
    for n in (1, 2, 17, 500):
        x = rng.exponential(size=n)
        assert gini(x) == pytest.approx(gini_naive(x), abs=1e-12)


def test_l2_examples():
    assert l2_to_reference(np.array([0.2, 0.8]), np.array([0.2, 0.8])) == 0.0
    assert l2_to_reference(np.array([0.5, 0.5]), np.array([1.0, 0.0])) == pytest.approx(math.sqrt(0.5))
    with pytest.raises(LengthMismatch):
        l2_to_reference(np.ones(2), np.ones(3))


def test_resample_follows_pi():
    pi = WeightVector(np.array([0.7, 0.2, 0.1]), np.ones(3))
    idx = resample(pi, 100_000, seed=3)
    assert np.bincount(idx, minlength=3) / 100_000 == pytest.approx([0.7, 0.2, 0.1], abs=0.01)
    assert np.array_equal(idx, resample(pi, 100_000, seed=3))
