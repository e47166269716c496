import itertools

import numpy as np
import pytest

from debias.core import (
    Box,
    BoxRamp,
    ClassRatio,
    DatasetCollection,
    Observation,
    OmegaMatrix,
    Perturbed,
    SimilarityExp,
    SimilarityRatio,
    SourceDataset,
    Table,
    Tabular,
    build_omega_matrix,
    evaluate_bias,
    l1_distance_to_box,
    spec_from_dict,
)
from debias.errors import (
    ConfigError,
    LengthMismatch,
    MissingField,
    NonFinite,
    UnsupportedObservation,
)


def grid_distance(e, lower, upper, step=0.05):
    """l1 distance to a box by brute force over a lattice of box points."""
    axes = [np.linspace(lo, hi, int(round((hi - lo) / step)) + 1) for lo, hi in zip(lower, upper)]
    best = np.inf
    for pt in itertools.product(*axes):
        best = min(best, float(np.abs(np.asarray(e) - np.asarray(pt)).sum()))
    return best


# --------------------------------------------------------------------------
# evaluate_bias examples


def test_box_ramp_inside_is_one():
    spec = BoxRamp((0.5,) * 3, (1.0,) * 3, 1.0)
    assert evaluate_bias(spec, Observation(0, embedding=(0.7, 0.6, 0.9))) == 1.0


def test_box_ramp_outside_hits_zero():
    spec = BoxRamp((0.5,) * 3, (1.0,) * 3, 0.1)
    e = (0.4, 0.6, 0.9)
    d = grid_distance(e, spec.lower, spec.upper)
    assert d == pytest.approx(0.1, abs=1e-12)
    assert l1_distance_to_box(np.array([e]), spec.lower, spec.upper)[0] == pytest.approx(d, abs=1e-12)
    assert evaluate_bias(spec, Observation(0, embedding=e)) == pytest.approx(max(0.0, 1 - d / 0.1), abs=1e-12)


def test_box_ramp_matches_grid_oracle():
    rng = np.random.default_rng(5)
    lower, upper = (0.2, 0.3, 0.1), (0.6, 0.5, 0.4)
    spec = BoxRamp(lower, upper, 0.5)
    for _ in range(30):
        # lattice points, so the exact projection lies on the oracle's grid
        e = rng.integers(-4, 25, 3) * 0.05
        d = grid_distance(e, lower, upper)
        got = evaluate_bias(spec, Observation(0, embedding=tuple(e)))
        assert got == pytest.approx(max(0.0, 1 - d / 0.5), abs=1e-9)


def test_box_ramp_zero_width_is_indicator():
    spec = BoxRamp((0.0,), (1.0,), 0.0)
    assert evaluate_bias(spec, Observation(0, embedding=(1.0,))) == 1.0
    assert evaluate_bias(spec, Observation(0, embedding=(1.0001,))) == 0.0


def test_class_ratio_example_and_rescale():
    p = (0.4, 0.4, 0.1, 0.1) + (0.0,) * 6
    spec = ClassRatio(p, (0.1,) * 10, clamp_max=np.inf)
    assert evaluate_bias(spec, Observation(0, label=0)) == pytest.approx(4.0)
    clamped = ClassRatio(p, (0.1,) * 10)
    src = SourceDataset(0, ids=np.arange(4), labels=np.array([0, 1, 2, 3]))
    om = build_omega_matrix([clamped], DatasetCollection([src], M=10))
    assert om.values[:, 0] == pytest.approx([1.0, 1.0, 0.25, 0.25])
    # pairwise ratios survive the rescale
    assert om.values[0, 0] / om.values[2, 0] == pytest.approx(4.0)


def test_similarity_exp_beta_zero():
    spec = SimilarityExp((0.0, 0.0), (1.0, 1.0), beta=0.0)
    assert evaluate_bias(spec, Observation(0, embedding=(3.0, -2.0))) == 1.0


def test_similarity_ratio():
    spec = SimilarityRatio((0.5, 0.5), (0.25, 0.75), beta=0.0, clamp_max=np.inf)
    got = evaluate_bias(spec, Observation(0, embedding=(1.0, 0.0)))
    assert got == pytest.approx(0.5 / 0.25)


def test_box_boundary_inclusive():
    spec = Box((0.0, 0.0), (0.5, 0.5))
    assert evaluate_bias(spec, Observation(0, embedding=(0.5, 0.0))) == 1.0
    assert evaluate_bias(spec, Observation(0, embedding=(0.5000001, 0.0))) == 0.0


def test_tabular_by_label_and_stratum():
    spec = Tabular({1: 0.3, 2: 1.0}, key="stratum")
    assert evaluate_bias(spec, Observation(0, stratum=1)) == 0.3
    assert evaluate_bias(spec, Observation(0, stratum=9)) == 0.0
    with pytest.raises(MissingField):
        evaluate_bias(spec, Observation(0))
    assert evaluate_bias(Tabular({4: 0.5}, key="label"), Observation(0, label=4)) == 0.5


def test_table_keyed_by_source_and_id():
    spec = Table({(0, 7): 0.25})
    assert evaluate_bias(spec, Observation(7, source=0)) == 0.25
    with pytest.raises(MissingField):
        evaluate_bias(spec, Observation(8, source=0))


def test_perturbed_zero_is_identity_and_bounded():
    base = Tabular({0: 0.5, 1: 1.0}, key="label")
    obs = [Observation(i, label=i % 2, stratum=i) for i in range(20)]
    for o in obs:
        assert evaluate_bias(Perturbed(base, 0.0, 3), o) == evaluate_bias(base, o)
        v = evaluate_bias(Perturbed(base, 0.1, 3), o)
        assert abs(v - evaluate_bias(base, o)) <= 0.1 + 1e-15


def test_evaluate_bias_is_pure():
    spec = Perturbed(BoxRamp((0.2,) * 3, (0.4,) * 3, 0.3), 0.05, 11)
    o = Observation(3, label=1, embedding=(0.1, 0.5, 0.9))
    assert evaluate_bias(spec, o) == evaluate_bias(spec, o)


def test_spec_round_trip():
    specs = [
        Tabular({1: 0.5}),
        ClassRatio((0.5, 0.5), (0.5, 0.5)),
        Box((0.0,), (1.0,)),
        BoxRamp((0.0,), (1.0,), 0.2, multiplier=2.0),
        SimilarityExp((0.0,), (1.0,), 0.5),
        SimilarityRatio((1.0,), (1.0,), 0.1),
        Table({(0, 1): 0.5}),
        Perturbed(Tabular({1: 0.5}), 0.01, 4),
    ]
    for s in specs:
        assert spec_from_dict(s.to_dict()) == s


def test_unknown_spec_kind():
    with pytest.raises(ConfigError):
        spec_from_dict({"kind": "nope"})


# --------------------------------------------------------------------------
# build_omega_matrix examples


def test_single_unbiased_source_gives_ones():
    src = SourceDataset(0, ids=np.arange(6), labels=np.zeros(6), strata=np.arange(6) % 3)
    om = build_omega_matrix([Tabular({0: 1.0, 1: 1.0, 2: 1.0})], DatasetCollection([src]))
    assert om.values.shape == (6, 1)
    assert np.all(om.values == 1.0)


def test_two_point_rows():
    from debias.generators import TwoPointConfig, gen_two_point

    data, specs = gen_two_point(TwoPointConfig(R=(1, 10), n=(50, 50), seed=1))
    om = build_omega_matrix(specs, data)
    z = data.strata
    # (1, 10) and (1, 1) up to the per-column rescale by the column max
    scale = np.array([1.0, 10.0])
    assert np.allclose(om.values[z == 1] * scale, [1.0, 10.0])
    assert np.allclose(om.values[z == 2] * scale, [1.0, 1.0])


def test_all_zero_row_is_an_error():
    src = [SourceDataset(k, ids=np.arange(3), labels=np.full(3, k)) for k in range(2)]
    specs = [Tabular({0: 1.0}, key="label"), Tabular({0: 1.0}, key="label")]
    with pytest.raises(UnsupportedObservation):
        build_omega_matrix(specs, DatasetCollection(src))


def test_spec_count_must_match_K():
    src = SourceDataset(0, ids=np.arange(3), labels=np.zeros(3))
    with pytest.raises(LengthMismatch):
        build_omega_matrix([Tabular({0: 1.0}, key="label")] * 2, DatasetCollection([src]))


def test_lower_clamp_never_raises_entries():
    rng = np.random.default_rng(0)
    e = rng.random((40, 2))
    data = DatasetCollection([SourceDataset(0, ids=np.arange(40), labels=np.zeros(40), embeddings=e)])
    hi = build_omega_matrix([BoxRamp((0.3, 0.3), (0.6, 0.6), 2.0)], data, rescale=False).values
    lo = build_omega_matrix([BoxRamp((0.3, 0.3), (0.6, 0.6), 2.0, clamp_max=0.5)], data, rescale=False).values
    assert np.all(lo <= hi)
    assert hi.min() >= 0 and hi.max() <= 1


def test_omega_csv_round_trip():
    src = SourceDataset(0, ids=np.arange(3), labels=np.zeros(3), strata=np.array([1, 2, 1]))
    om = build_omega_matrix([Tabular({1: 1 / 3, 2: 1.0})], DatasetCollection([src]))
    text = om.to_csv()
    assert text.splitlines()[0] == "source,obs,omega_0"
    assert "\r" not in text
    back = OmegaMatrix.from_csv(text)
    assert np.array_equal(back.values, om.values)


# --------------------------------------------------------------------------
# datasets


def test_source_dataset_validation():
    with pytest.raises(LengthMismatch):
        SourceDataset(0, ids=np.arange(3), labels=np.zeros(2))
    with pytest.raises(NonFinite):
        SourceDataset(0, ids=np.arange(1), labels=np.zeros(1), embeddings=np.array([[np.nan]]))


def test_collection_lambda_and_observation_round_trip():
    obs = [Observation(i, label=i % 3, stratum=i) for i in range(5)]
    a = SourceDataset.from_observations(0, obs[:2])
    b = SourceDataset.from_observations(1, obs[2:])
    data = DatasetCollection([a, b])
    assert data.lam == pytest.approx([0.4, 0.6])
    assert data.observation(3) == Observation(3, label=0, stratum=3, source=1)
    assert a.observations == [Observation(0, 0, 0, source=0), Observation(1, 1, 1, source=0)]


def test_from_arrays_groups_by_source():
    data = DatasetCollection.from_arrays([1, 0, 1], [10, 11, 12], [0, 1, 0])
    assert data.n_k.tolist() == [1, 2]
    assert data.ids.tolist() == [11, 10, 12]
