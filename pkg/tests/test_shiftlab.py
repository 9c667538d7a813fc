import math

import numpy as np
import pytest

from general.errors import ConfigurationError, ContractViolation
from general.models import ContextSpec, ModelDims, SyntheticSpec
from general.numerics import RngState
from general.process import summary_features, zscore
from general.shiftlab import (assign_tiers, build_tiers, class_phases, class_templates, clean_signal,
                              compute_cm, estimate_cm, gaussian_kernel, generate_dataset, median_heuristic,
                              mixing_generator, mixing_matrix, mmd, mmd_squared, select_regime,
                              tier_contexts, train_sensor_baseline)


def _oracle_mmd2(X, Y, sigma, kind):
    def k(a, b):
        return math.exp(-sum((ai - bi) ** 2 for ai, bi in zip(a, b)) / (2 * sigma ** 2))

    m, n = len(X), len(Y)
    if kind == "biased":
        xx = sum(k(a, b) for a in X for b in X) / (m * m)
        yy = sum(k(a, b) for a in Y for b in Y) / (n * n)
    else:
        xx = sum(k(X[i], X[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
        yy = sum(k(Y[i], Y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    xy = sum(k(a, b) for a in X for b in Y) / (m * n)
    return xx + yy - 2 * xy


def test_median_heuristic_examples():
    assert median_heuristic([[0.0, 0.0], [2.0, 0.0]]) == pytest.approx(2.0)
    assert median_heuristic(np.ones((5, 3))) == 1e-6
    assert median_heuristic([0.0, 1.0, 2.0, 3.0]) == pytest.approx(1.5)
    with pytest.raises(ContractViolation):
        median_heuristic([[1.0, 2.0]])


def test_median_heuristic_subsample_is_seeded():
    points = np.random.default_rng(0).normal(size=(300, 2))
    a = median_heuristic(points, max_points=50, rng=RngState(1))
    b = median_heuristic(points, max_points=50, rng=RngState(1))
    assert a == b


def test_kernel_entries():
    pts = np.random.default_rng(1).normal(size=(6, 3))
    k = gaussian_kernel(pts, pts, 1.3)
    assert np.allclose(np.diag(k), 1.0)
    assert np.all(k > 0) and np.all(k <= 1.0)


def test_mmd_identical_sets_is_zero():
    X = np.random.default_rng(2).normal(size=(10, 3))
    assert mmd(X, X, 1.0) == 0.0


def test_mmd_singletons_closed_form():
    x, y = np.array([[0.0, 1.0]]), np.array([[1.0, -1.0]])
    expected = 2 * (1 - math.exp(-5.0 / (2 * 0.7 ** 2)))
    assert mmd_squared(x, y, 0.7) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("kind", ["biased", "unbiased"])
def test_mmd_matches_double_loop_oracle(kind):
    gen = np.random.default_rng(3)
    for _ in range(200):
        X = gen.normal(size=(8, 3))
        Y = gen.normal(0.5, 1.2, size=(8, 3))
        sigma = float(gen.uniform(0.5, 2.0))
        oracle = _oracle_mmd2(X.tolist(), Y.tolist(), sigma, kind)
        assert mmd_squared(X, Y, sigma, kind) == pytest.approx(oracle, abs=1e-9)


def test_biased_mmd_is_symmetric_and_non_negative():
    gen = np.random.default_rng(4)
    for _ in range(20):
        X, Y = gen.normal(size=(7, 2)), gen.normal(1.0, size=(9, 2))
        assert abs(mmd(X, Y, 1.0) - mmd(Y, X, 1.0)) < 1e-12
        assert mmd(X, Y, 1.0) >= 0.0


def test_mmd_size_and_bandwidth_violations():
    X = np.zeros((3, 2))
    with pytest.raises(ContractViolation):
        mmd(X, np.zeros((0, 2)), 1.0)
    with pytest.raises(ContractViolation):
        mmd(X, np.zeros((1, 2)), 1.0, kind="unbiased")
    with pytest.raises(ContractViolation):
        mmd(X, X, 0.0)
    with pytest.raises(ContractViolation):
        mmd(X, np.zeros((3, 3)), 1.0)


def test_assign_tiers():
    assert assign_tiers(["a", "b", "c"]) == {"a": "Low", "b": "Mid", "c": "High"}
    tiers = assign_tiers(list("abcdef"))
    assert [tiers[c] for c in "abcdef"] == ["Low", "Low", "Mid", "Mid", "High", "High"]


def test_compute_cm():
    assert compute_cm(0.8, 0.8) == 0.0
    assert compute_cm(0.8, 0.5) == pytest.approx(0.375)
    assert compute_cm(0.4, 0.25) == pytest.approx(compute_cm(0.8, 0.5))
    assert compute_cm(0.5, 0.6) < 0
    with pytest.raises(ContractViolation):
        compute_cm(0.0, 0.5)


@pytest.mark.parametrize("cm,name", [(0.19, "weak"), (0.25, "medium"), (0.37, "medium"),
                                     (0.45, "strong"), (0.48, "strong")])
def test_select_regime(cm, name):
    assert select_regime(cm).name == name


def test_select_regime_rejects_non_finite():
    with pytest.raises(ContractViolation):
        select_regime(float("nan"))


def test_identity_context_reproduces_clean_signals():
    spec = SyntheticSpec(num_classes=3, channels=2, length=16, samples_per_cell=4, seed=9,
                         phase_jitter=0.0, amplitude_jitter=0.0,
                         contexts=[ContextSpec(name="home", description="Home", shift=0.0, gain=1.0, noise=0.0)])
    dataset = generate_dataset(spec)
    templates, phases = class_templates(spec), class_phases(spec)
    for segment, label in zip(dataset.segments, dataset.labels):
        expected = clean_signal(spec, templates, phases, int(label)).astype(np.float32)
        assert np.array_equal(segment, expected)


def test_shifted_context_is_rotation_plus_offset():
    spec = SyntheticSpec(num_classes=2, channels=3, length=16, samples_per_cell=3, seed=5,
                         phase_jitter=0.0, amplitude_jitter=0.0,
                         contexts=[ContextSpec(name="arm", description="Arm", shift=0.6, gain=1.0, noise=0.0)])
    dataset = generate_dataset(spec)
    templates, phases = class_templates(spec), class_phases(spec)
    skew, offset = mixing_generator(spec)
    for segment, label in zip(dataset.segments, dataset.labels):
        clean = clean_signal(spec, templates, phases, int(label))
        expected = mixing_matrix(skew, 0.6) @ clean + 0.6 * offset[:, None]
        assert np.allclose(segment, expected, atol=1e-5)


def test_mixing_matrix_is_rotation():
    skew, offset = mixing_generator(SyntheticSpec(channels=3))
    assert np.array_equal(mixing_matrix(skew, 0.0), np.eye(3))
    m = mixing_matrix(skew, 0.7)
    assert np.allclose(m @ m.T, np.eye(3), atol=1e-10)
    assert np.linalg.norm(offset) == pytest.approx(1.0)


def test_generate_dataset_layout_and_determinism(tiny_spec):
    a = generate_dataset(tiny_spec)
    b = generate_dataset(tiny_spec)
    assert len(a) == 5 * 3 * 8
    assert a.segments.shape == (120, 2, 16)
    assert np.array_equal(a.segments, b.segments)
    assert a.context_ids[:24] == ["left_pocket"] * 24
    assert a.labels[:8].tolist() == [0] * 8
    assert a.descriptions["belt"] == "Belt"


@pytest.mark.parametrize("field", ["num_classes", "channels", "length", "samples_per_cell"])
def test_generate_dataset_rejects_non_positive_sizes(tiny_spec, field):
    with pytest.raises(ConfigurationError) as info:
        generate_dataset(tiny_spec.model_copy(update={field: 0}))
    assert info.value.key == f"data.{field}"


def test_build_tiers_orders_by_shift(tiny_spec):
    dataset = generate_dataset(tiny_spec.model_copy(update={"samples_per_cell": 20}))
    report = build_tiers(dataset, ["left_pocket", "right_pocket"], ["upper_arm", "wrist", "belt"])
    assert report.tiers == {"upper_arm": "Low", "wrist": "Mid", "belt": "High"}
    assert report.mmd["upper_arm"] < report.mmd["wrist"] < report.mmd["belt"]
    assert tier_contexts(report, "High") == ["belt"]
    assert [row["context"] for row in report.rows()] == ["upper_arm", "wrist", "belt"]


def test_target_matching_source_lands_in_low_tier():
    contexts = [
        ContextSpec(name="src", description="Source", shift=0.1),
        ContextSpec(name="twin", description="Twin", shift=0.1),
        ContextSpec(name="near", description="Near", shift=0.5),
        ContextSpec(name="far", description="Far", shift=1.0),
    ]
    spec = SyntheticSpec(num_classes=2, channels=2, length=16, samples_per_cell=5, contexts=contexts,
                         phase_jitter=0.0, amplitude_jitter=0.0)
    report = build_tiers(generate_dataset(spec), ["src"], ["twin", "near", "far"])
    assert report.tiers["twin"] == "Low"
    assert report.mmd["twin"] < 1e-6


def test_build_tiers_preconditions(tiny_spec):
    dataset = generate_dataset(tiny_spec)
    with pytest.raises(ContractViolation):
        build_tiers(dataset, ["left_pocket"], ["wrist", "belt"])
    with pytest.raises(ContractViolation):
        build_tiers(dataset, ["left_pocket", "wrist"], ["upper_arm", "wrist", "belt"])
    with pytest.raises(ConfigurationError):
        build_tiers(dataset, ["left_pocket"], ["upper_arm", "wrist", "kitchen"])


@pytest.mark.slow
def test_mmd_grows_with_shift_over_seeds():
    shifts = [0.0, 0.25, 0.5, 0.75, 1.0]
    for seed in range(5):
        contexts = [ContextSpec(name="source", description="Source", shift=0.0, noise=0.1)]
        contexts += [ContextSpec(name=f"s{i}", description=f"Shift {s}", shift=s, noise=0.1)
                     for i, s in enumerate(shifts)]
        spec = SyntheticSpec(num_classes=3, channels=3, length=64, samples_per_cell=40,
                             contexts=contexts, seed=seed)
        dataset = generate_dataset(spec)
        feats, _, _ = zscore(summary_features(dataset.segments))
        sigma = median_heuristic(feats, rng=RngState(seed))
        src = feats[dataset.indices_for(["source"])]
        values = [mmd(src, feats[dataset.indices_for([f"s{i}"])], sigma) for i in range(len(shifts))]
        assert all(a <= b for a, b in zip(values, values[1:])), (seed, values)


@pytest.mark.slow
def test_sensor_baseline_degrades_with_shift():
    dims = ModelDims(channels=3, length=64, latent=16, hidden=16, num_classes=4, conv_channels=(8, 16))
    drops = []
    for seed in range(5):
        spec = SyntheticSpec(num_classes=4, channels=3, length=64, samples_per_cell=60, seed=seed,
                             contexts=[ContextSpec(name="src", description="Source", shift=0.1, noise=0.1),
                                       ContextSpec(name="near", description="Near", shift=0.2, noise=0.1),
                                       ContextSpec(name="mid", description="Mid", shift=0.5, noise=0.1),
                                       ContextSpec(name="far", description="Far", shift=0.9, noise=0.1)])
        dataset = generate_dataset(spec)
        report = build_tiers(dataset, ["src"], ["near", "mid", "far"])
        baseline, _ = train_sensor_baseline(dataset.select_contexts(["src"]), dims, RngState(seed))
        report = estimate_cm(baseline, dataset, report)
        drops.append(report.perf_low - report.perf_high)
    assert np.mean(drops) > 0
