import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdm_forge.errors import InsufficientSamplesError, ShapeError
from cdm_forge.metrics import (GaussianFit, MetricReport, build_report, diversity_score, few_shot_classification,
                               fit_gaussian, frechet_distance, mean_pairwise_distance)
from cdm_forge.rng import SeededRNG


def fit(mean, var):
    mean, var = np.atleast_1d(np.asarray(mean, float)), np.atleast_1d(np.asarray(var, float))
    return GaussianFit(mean, var, 10)


def test_fit_gaussian_hand_values():
    g = fit_gaussian([[0.0], [2.0]])
    np.testing.assert_array_equal(g.mean, [1.0])
    np.testing.assert_array_equal(g.cov, [2.0])
    assert g.count == 2


def test_fit_gaussian_identical_samples():
    assert np.all(fit_gaussian(np.ones((4, 3))).cov == 0)
    assert np.all(fit_gaussian(np.ones((4, 3)), full=True).cov == 0)


def test_fit_gaussian_permutation_invariant():
    x = SeededRNG(0).normal_array((20, 3))
    p = SeededRNG(1).permutation(20)
    a, b = fit_gaussian(x, full=True), fit_gaussian(x[p], full=True)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-14)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-14)


def test_fit_gaussian_needs_two():
    with pytest.raises(InsufficientSamplesError):
        fit_gaussian([[1.0, 2.0]])


def test_frechet_closed_form_1d():
    assert frechet_distance(fit(0, 1), fit(0, 1)) == 0.0
    assert abs(frechet_distance(fit(0, 1), fit(1, 1)) - 1.0) <= 1e-10
    assert abs(frechet_distance(fit(0, 1), fit(0, 4)) - 1.0) <= 1e-10
    full = lambda m, v: GaussianFit(np.array([m], float), np.array([[v]], float), 10)
    assert abs(frechet_distance(full(0, 1), full(1, 1)) - 1.0) <= 1e-10
    assert abs(frechet_distance(full(0, 1), full(0, 4)) - 1.0) <= 1e-10


def test_frechet_dimension_mismatch():
    with pytest.raises(ShapeError):
        frechet_distance(fit([0, 0], [1, 1]), fit(0, 1))
    with pytest.raises(ShapeError):
        frechet_distance(fit([0, 0], [1, 1]), GaussianFit(np.zeros(2), np.eye(2), 3))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 8))
def test_full_and_diagonal_agree_on_diagonal_covariances(seed, d):
    r = SeededRNG(seed)
    ma, mb = r.normal_array(d), r.normal_array(d)
    va, vb = np.exp(r.normal_array(d)), np.exp(r.normal_array(d))
    diag = frechet_distance(GaussianFit(ma, va, 5), GaussianFit(mb, vb, 5))
    full = frechet_distance(GaussianFit(ma, np.diag(va), 5), GaussianFit(mb, np.diag(vb), 5))
    assert abs(diag - full) <= 1e-8


def test_full_mode_matches_scipy_sqrtm():
    linalg = pytest.importorskip("scipy.linalg")
    r = SeededRNG(4)
    a, b = r.normal_array((40, 5)), r.normal_array((40, 5)) * 1.7 + 0.3
    fa, fb = fit_gaussian(a, full=True), fit_gaussian(b, full=True)
    root = np.real(linalg.sqrtm(fa.cov @ fb.cov))
    ref = np.sum((fa.mean - fb.mean) ** 2) + np.trace(fa.cov + fb.cov - 2 * root)
    assert frechet_distance(fa, fb) == pytest.approx(ref, abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.booleans())
def test_frechet_symmetric_nonnegative(seed, full):
    r = SeededRNG(seed)
    a = fit_gaussian(r.normal_array((12, 3)), full)
    b = fit_gaussian(r.normal_array((12, 3)) * 2 + 1, full)
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= -1e-10 and abs(ab - ba) <= 1e-10
    assert abs(frechet_distance(a, a)) <= 1e-10


def test_diversity_examples():
    assert diversity_score({0: np.ones((5, 3))}) == 0.0
    assert diversity_score({0: np.array([[0.0], [2.0]])}) == 2.0
    assert diversity_score({0: np.array([[0.0], [2.0]]), 1: np.array([[0.0], [4.0]])}) == 3.0
    with pytest.raises(InsufficientSamplesError):
        diversity_score({0: np.zeros((1, 2))})


def test_pairwise_matches_brute_force():
    x = SeededRNG(5).normal_array((9, 4))
    brute = [np.linalg.norm(x[i] - x[j]) for i in range(9) for j in range(i + 1, 9)]
    assert mean_pairwise_distance(x) == pytest.approx(np.mean(brute), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 10.0))
def test_diversity_scaling_and_permutation(seed, k):
    r = SeededRNG(seed)
    feats = {0: r.normal_array((6, 3)), 1: r.normal_array((4, 3))}
    base = diversity_score(feats)
    assert diversity_score({c: k * f for c, f in feats.items()}) == pytest.approx(k * base, rel=1e-9)
    assert diversity_score({c: f[::-1] for c, f in feats.items()}) == pytest.approx(base, rel=1e-12)


def test_report_aggregate_and_csv():
    r = SeededRNG(6)
    real = {3: r.normal_array((20, 2)), 7: r.normal_array((20, 2)) + 1}
    fake = {3: r.normal_array((10, 2)), 7: r.normal_array((12, 2))}
    rep = build_report(real, fake, seed=4, config={"k": "3"})
    per = [rep.per_class[c]["frechet"] for c in (3, 7)]
    assert rep.frechet == pytest.approx(np.mean(per), rel=1e-15)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "# format_version=1"
    assert lines[1] == "row,frechet,diversity,n_real,n_fake"
    assert [ln.split(",")[0] for ln in lines[2:]] == ["class_3", "class_7", "aggregate"]
    assert lines[-1].endswith(",40,22")
    assert rep.to_csv() == build_report(real, fake, seed=4, config={"k": "3"}).to_csv()
    assert "config k = 3" in rep.summary()


def test_few_shot_harness_with_informative_generator():
    r = SeededRNG(7)
    centers = r.normal_array((5, 4)) * 2
    y = np.repeat(np.arange(5), 40)
    x = centers[y] + 0.8 * r.normal_array((200, 4))

    def generate(c, support, rng):
        return centers[c] + 0.8 * rng.normal_array((32, 4))

    res = few_shot_classification(x, y, [2, 3, 4], lambda a: a, generate, n_way=10, n_shot=1, episodes=4,
                                  rng=SeededRNG(8), head_epochs=100)
    assert len(res.episode_accuracies) == 4
    assert res.accuracy >= res.baseline_accuracy
    assert 0.0 <= res.baseline_accuracy <= 1.0
