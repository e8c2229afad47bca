import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evdro.ambiguity import (
    EPS_SIGMA,
    AmbiguitySet,
    BootstrapConfig,
    bootstrap_thresholds,
    build_set,
    estimate_moments,
    sample_ellipsoid_means,
    set_from_residuals,
    worst_case_coordinate_bounds,
    worst_case_linear,
)
from evdro.errors import DimensionError
from evdro.forecasting import ArimaModel, SeriesPanel, forecast_path, rolling_residuals


def random_set(rng, d, gamma1=None):
    A = rng.normal(size=(d, d))
    Sigma = A @ A.T + 0.1 * np.eye(d)
    g1 = rng.uniform(0.1, 2.0) if gamma1 is None else gamma1
    return build_set(rng.normal(size=d), Sigma, g1, g1 + 1.0)


class TestMoments:
    def test_identical_rows(self):
        mu, Sigma = estimate_moments(np.tile([1.0, 2.0, 3.0], (5, 1)))
        assert mu.tolist() == [1.0, 2.0, 3.0]
        assert np.array_equal(Sigma, EPS_SIGMA * np.eye(3))

    def test_two_rows(self):
        mu, Sigma = estimate_moments(np.array([[0.0, 0.0], [2.0, 0.0]]))
        assert mu.tolist() == [1.0, 0.0]
        assert Sigma[0, 0] == pytest.approx(2.0 + EPS_SIGMA, abs=1e-15)

    def test_monte_carlo_identity(self):
        D = np.random.default_rng(0).normal(size=(10_000, 4))
        _, Sigma = estimate_moments(D)
        assert np.max(np.abs(Sigma - np.eye(4))) <= 0.1

    def test_too_few_rows(self):
        with pytest.raises(ValueError):
            estimate_moments(np.zeros((1, 3)))


class TestBootstrap:
    def test_degenerate(self):
        g1, g2 = bootstrap_thresholds(np.tile([0.5, -1.0], (40, 1)), BootstrapConfig(NB=50, seed=1))
        assert g1 == 0.0 and g2 == 1.0

    def test_deterministic(self):
        D = np.random.default_rng(3).normal(size=(60, 4))
        cfg = BootstrapConfig(NB=100, seed=7)
        assert bootstrap_thresholds(D, cfg) == bootstrap_thresholds(D, cfg)

    def test_seed_matters(self):
        D = np.random.default_rng(3).normal(size=(60, 4))
        assert bootstrap_thresholds(D, BootstrapConfig(NB=50, seed=1)) != \
            bootstrap_thresholds(D, BootstrapConfig(NB=50, seed=2))

    def test_thresholds_shrink_with_sample_size(self):
        med = []
        for M in (50, 200, 1000):
            g = [bootstrap_thresholds(np.random.default_rng(100 + s).normal(size=(M, 6)),
                                      BootstrapConfig(NB=100, seed=s)) for s in range(20)]
            med.append(np.median(g, axis=0))
        med = np.array(med)
        assert np.all(np.diff(med[:, 0]) <= 0) and np.all(np.diff(med[:, 1]) <= 0)

    def test_estimates_stabilize_with_resamples(self):
        # more resamples -> less seed-to-seed spread of the thresholds
        D = np.random.default_rng(5).normal(size=(100, 4))
        spread = []
        for NB in (10, 100, 1000):
            g = np.array([bootstrap_thresholds(D, BootstrapConfig(NB=NB, seed=s)) for s in range(20)])
            spread.append(g.std(axis=0))
        spread = np.array(spread)
        assert np.all(np.diff(spread, axis=0) <= 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BootstrapConfig(NB=5)
        with pytest.raises(ValueError):
            BootstrapConfig(alpha=1.0)

    def test_small_sample_warns(self, caplog):
        bootstrap_thresholds(np.random.default_rng(0).normal(size=(10, 2)), BootstrapConfig(NB=10))
        assert "residual rows" in caplog.text


class TestBuildSet:
    def test_singleton_mean(self):
        s = build_set(np.zeros(3), np.eye(3), 0.0, 1.0, 0.25)
        assert s.gamma1 == 0.0 and s.dim == 3

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_set(np.zeros(2), np.eye(2), 1.0, 0.5)

    def test_pipeline(self):
        m = ArimaModel((0, 0, 0), [], [], 5.0, 1.0)
        y = 5.0 + np.random.default_rng(2).normal(size=(120, 2))
        panel = SeriesPanel(np.abs(y))
        rs = rolling_residuals([m, m], panel, 2)
        s = set_from_residuals(forecast_path([m, m], panel, 2), rs, BootstrapConfig(NB=50, seed=0))
        assert s.dim == 4 and s.gamma2 >= max(s.gamma1, 1.0)
        assert AmbiguitySet.from_dict(s.to_dict()).to_dict() == s.to_dict()

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            build_set(np.zeros(2), np.zeros((2, 2)), 0.0, 1.0)
        with pytest.raises(DimensionError):
            build_set(np.zeros(2), np.eye(3), 0.0, 1.0)


def ascent_oracle(aset, z, iters=2000):
    """Projected gradient ascent of z^T mu over the mean ellipsoid, in whitened coordinates."""
    g = np.sqrt(aset.gamma1) * aset.Sigma_sqrt @ z
    u = np.zeros_like(z)
    step = 1.0 / max(np.linalg.norm(g), 1e-12)
    for _ in range(iters):
        u = u + step * g
        n = np.linalg.norm(u)
        if n > 1:
            u /= n
    return z @ aset.center + g @ u


class TestWorstCase:
    def test_singleton(self):
        s = build_set([1.0, 2.0], np.eye(2), 0.0, 1.0)
        assert worst_case_linear(s, [3.0, -1.0]) == 1.0

    def test_unit_direction(self):
        s = build_set([1.0, 1.0], np.eye(2), 1.0, 1.0)
        assert worst_case_linear(s, [1.0, 0.0]) == pytest.approx(2.0)

    def test_against_ascent(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            s = random_set(rng, 5)
            z = rng.normal(size=5)
            assert worst_case_linear(s, z) == pytest.approx(ascent_oracle(s, z), abs=1e-6)

    def test_dominates_samples(self):
        rng = np.random.default_rng(2)
        s = random_set(rng, 4)
        z = rng.normal(size=4)
        mus = sample_ellipsoid_means(s, 1000, rng)
        quad = np.einsum("ni,ij,nj->n", mus - s.center, np.linalg.inv(s.Sigma), mus - s.center)
        assert np.all(quad <= s.gamma1 * (1 + 1e-9))
        assert np.all(mus @ z <= worst_case_linear(s, z) + 1e-9)

    @settings(max_examples=50)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
    def test_positive_homogeneity(self, seed, alpha):
        rng = np.random.default_rng(seed)
        s = random_set(rng, 3)
        z = rng.normal(size=3)
        assert worst_case_linear(s, alpha * z) == pytest.approx(alpha * worst_case_linear(s, z), rel=1e-10, abs=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            worst_case_linear(build_set([0.0], [[1.0]], 0.0, 1.0), [1.0, 2.0])

    def test_coordinate_bounds_singleton(self):
        s = build_set([1.0, 2.0], np.eye(2), 0.0, 1.0)
        up, lo = worst_case_coordinate_bounds(s)
        assert up.tolist() == [1.0, 2.0] and lo.tolist() == [1.0, 2.0]

    def test_coordinate_bounds_hand(self):
        up, lo = worst_case_coordinate_bounds(build_set([2.0], [[4.0]], 1.0, 1.0))
        assert up[0] == pytest.approx(4.0) and lo[0] == pytest.approx(0.0)

    def test_coordinate_bounds_match_linear(self):
        s = random_set(np.random.default_rng(4), 4)
        up, lo = worst_case_coordinate_bounds(s)
        for i in range(4):
            e = np.eye(4)[i]
            assert up[i] == pytest.approx(worst_case_linear(s, e), abs=1e-12)
            assert lo[i] == pytest.approx(max(0.0, -worst_case_linear(s, -e)), abs=1e-12)
