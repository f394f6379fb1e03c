import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from actdetect import scoring


def test_euclidean_zero_vector():
    assert scoring.tau_euclidean(np.zeros(5)) == 0.0


def test_euclidean_worked_example():
    assert scoring.tau_euclidean([3.0, 4.0]) == pytest.approx(12.5)


def test_euclidean_matches_latent_log_prior():
    z = np.random.default_rng(0).normal(0, 1, 10)
    n = len(z)
    neg_log_prior = 0.5 * n * np.log(2 * np.pi) + 0.5 * np.sum(z * z)
    reconstructed = 0.5 * n * np.log(2 * np.pi) + 0.5 * n * scoring.tau_euclidean(z)
    assert reconstructed == pytest.approx(neg_log_prior)


def test_harmonic_constant_vector():
    assert scoring.tau_harmonic([1.0, 1.0]) == pytest.approx(1.0)


def test_harmonic_worked_example():
    assert scoring.tau_harmonic([1.0, 2.0]) == pytest.approx(1.6)


def test_harmonic_zero_coordinate_flagged():
    with pytest.warns(RuntimeWarning, match="harmonic"):
        assert scoring.tau_harmonic([1.0, 0.0]) == 0.0


@given(st.floats(min_value=0.1, max_value=10.0))
@settings(max_examples=30, deadline=None)
def test_tau_scale_relations(c):
    z = np.array([0.5, -1.5, 2.0])
    assert scoring.tau_euclidean(c * z) == pytest.approx(c * c * scoring.tau_euclidean(z))
    assert scoring.tau_harmonic(c * z) == pytest.approx(c * c * scoring.tau_harmonic(z))


def test_tau_permutation_invariance():
    rng = np.random.default_rng(1)
    z = rng.normal(0, 1, 8)
    perm = rng.permutation(8)
    assert scoring.tau_euclidean(z[perm]) == pytest.approx(scoring.tau_euclidean(z))
    assert scoring.tau_harmonic(z[perm]) == pytest.approx(scoring.tau_harmonic(z))


def _fit_from(mean, cov):
    # exact moments for the worked examples: construct the fit directly
    from scipy.linalg import cho_factor

    d = len(mean)
    ridge = 1e-12
    return scoring.MahalanobisFit(
        mean=np.asarray(mean, dtype=float),
        cov=np.asarray(cov, dtype=float),
        ridge=ridge,
        _chol=cho_factor(np.asarray(cov, dtype=float) + ridge * np.eye(d), lower=True),
    )


def test_mahalanobis_identity_covariance():
    fit = _fit_from([0.0, 0.0], np.eye(2))
    assert scoring.tau_mahalanobis(fit, [1.0, 1.0]) == pytest.approx(np.sqrt(2), rel=1e-6)


def test_mahalanobis_diagonal_covariance():
    fit = _fit_from([0.0, 0.0], np.diag([4.0, 1.0]))
    assert scoring.tau_mahalanobis(fit, [2.0, 1.0]) == pytest.approx(np.sqrt(2), rel=1e-6)


def test_mahalanobis_relation_to_euclidean():
    fit = _fit_from([0.0] * 4, np.eye(4))
    z = np.array([0.3, -1.0, 2.0, 0.7])
    assert scoring.tau_mahalanobis(fit, z) == pytest.approx(np.sqrt(4 * scoring.tau_euclidean(z)), rel=1e-6)


def test_fit_mahalanobis_recovers_moments():
    rng = np.random.default_rng(3)
    z = rng.normal(0, 1, (5000, 3))
    fit = scoring.fit_mahalanobis(z)
    np.testing.assert_allclose(fit.mean, z.mean(axis=0))
    np.testing.assert_allclose(fit.cov, np.cov(z.T, bias=True))


def test_fit_mahalanobis_warns_when_underdetermined():
    z = np.random.default_rng(4).normal(0, 1, (5, 8))
    with pytest.warns(RuntimeWarning, match="ridge"):
        scoring.fit_mahalanobis(z)


def test_hbos_worked_example():
    fit = scoring.fit_hbos(np.array([[0.0], [0.0], [0.0], [1.0]]), k=2)
    np.testing.assert_allclose(fit.heights[0], [1.0, 1.0 / 3.0])
    assert scoring.tau_hbos(fit, [0.0]) == 0.0
    assert scoring.tau_hbos(fit, [1.0]) == pytest.approx(np.log(3.0))


def test_hbos_fullest_bin_scores_zero():
    rng = np.random.default_rng(5)
    z = rng.normal(0, 1, (200, 3))
    fit = scoring.fit_hbos(z, k=5)
    # pick per-dim midpoints of the tallest bins
    point = []
    for i in range(3):
        b = int(np.argmax(fit.heights[i]))
        point.append(0.5 * (fit.edges[i][b] + fit.edges[i][b + 1]))
    assert scoring.tau_hbos(fit, point) == 0.0


def test_hbos_out_of_range_floor():
    fit = scoring.fit_hbos(np.array([[0.0], [1.0]]), k=2)
    assert scoring.tau_hbos(fit, [5.0]) == pytest.approx(np.log(1.0 / scoring.HBOS_FLOOR))


def test_hbos_score_decreases_with_height():
    fit = scoring.fit_hbos(np.array([[0.0], [0.0], [0.0], [1.0]]), k=2)
    assert scoring.tau_hbos(fit, [1.0]) > scoring.tau_hbos(fit, [0.0])


def test_hbos_requires_k_at_least_two():
    with pytest.raises(ValueError):
        scoring.fit_hbos(np.zeros((4, 1)), k=1)


def test_classify_boundary_inclusive():
    assert scoring.classify(1.0, 0.5) == 1
    assert scoring.classify(0.5, 0.5) == 1  # boundary counts as anomalous
    assert scoring.classify(0.49, 0.5) == 0


def test_classify_monotone():
    taus = np.linspace(-3, 3, 50)
    decisions = [scoring.classify(t, 0.7) for t in taus]
    assert decisions == sorted(decisions)


def test_choose_threshold_quantile():
    theta = scoring.choose_threshold(np.arange(1.0, 101.0), 0.05)
    assert 95.0 < theta < 96.0
    scores = np.arange(1.0, 101.0)
    assert np.mean(scores >= theta) == pytest.approx(0.05)


def test_choose_threshold_zero_budget():
    scores = np.array([1.0, 5.0, 3.0])
    theta = scoring.choose_threshold(scores, 0.0)
    assert theta > 5.0
    assert np.mean(scores >= theta) == 0.0


def test_choose_threshold_full_budget():
    assert scoring.choose_threshold([1.0, 2.0], 1.0) == -np.inf


def test_choose_threshold_empty_errors():
    with pytest.raises(ValueError):
        scoring.choose_threshold([], 0.5)


def test_fit_serialization_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    z = rng.normal(0, 1, (300, 4))
    maha = scoring.fit_mahalanobis(z)
    hbos = scoring.fit_hbos(z, k=10)
    scoring.save_fit(maha, tmp_path / "maha.daaf")
    scoring.save_fit(hbos, tmp_path / "hbos.daaf")
    maha2 = scoring.load_fit(tmp_path / "maha.daaf")
    hbos2 = scoring.load_fit(tmp_path / "hbos.daaf")
    probe = rng.normal(0, 1, 4)
    assert scoring.tau_mahalanobis(maha2, probe) == pytest.approx(scoring.tau_mahalanobis(maha, probe), rel=1e-3)
    assert scoring.tau_hbos(hbos2, probe) == pytest.approx(scoring.tau_hbos(hbos, probe), rel=1e-3)
