"""Tests for quasi-random pool construction and region statistics.

Reference oracles: scipy.stats.truncnorm for the truncated-normal inverse
CDF, scipy.stats.spearmanr for rank correlations, and scipy.stats.qmc's
discrepancy estimator for the low-discrepancy property.
"""

from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import kstest, qmc, spearmanr, truncnorm

from colflux.column import (
    N_MEAS,
    SLOT_F,
    SLOT_M_BOTTOM,
    SLOT_QF,
    SLOT_TF,
    NoiseSpec,
)
from colflux.sampling import (
    MAX_SOBOL_DIM,
    InitialConditionPool,
    NoisePool,
    PoolBuildError,
    RegionData,
    TruncatedMvn,
    build_initial_pool,
    build_noise_pool,
    fit_truncated_mvn,
    iman_conover,
    load_table,
    sobol_points,
    truncated_normal_ppf,
)


class TestSobolPoints:
    def test_first_points_in_one_dimension(self):
        pts = sobol_points(3, 1)
        assert pts.shape == (3, 1)
        assert pts[:, 0].tolist() == [0.5, 0.75, 0.25]

    def test_all_points_strictly_inside_unit_cube(self):
        pts = sobol_points(512, 8)
        assert pts.shape == (512, 8)
        assert np.all(pts > 0.0)
        assert np.all(pts < 1.0)

    def test_lower_discrepancy_than_pseudo_random(self):
        low = qmc.discrepancy(sobol_points(256, 2), method="L2-star")
        rng = np.random.default_rng(0)
        ref = [
            qmc.discrepancy(rng.uniform(size=(256, 2)), method="L2-star")
            for _ in range(20)
        ]
        assert low < np.mean(ref)

    def test_dimension_cap(self):
        assert MAX_SOBOL_DIM == 64
        sobol_points(4, MAX_SOBOL_DIM)
        with pytest.raises(ValueError):
            sobol_points(4, MAX_SOBOL_DIM + 1)
        with pytest.raises(ValueError):
            sobol_points(4, 0)

    def test_count_cap(self):
        with pytest.raises(ValueError):
            sobol_points(0, 2)
        with pytest.raises(ValueError):
            sobol_points(2**20 + 1, 2)


class TestTruncatedNormalPpf:
    def test_matches_reference_inverse_cdf(self):
        mean, sigma, lo, hi = 1.2, 0.4, 0.5, 2.0
        u = np.linspace(0.001, 0.999, 57)
        got = truncated_normal_ppf(u, mean, sigma, lo, hi)
        ref = truncnorm.ppf(
            u, (lo - mean) / sigma, (hi - mean) / sigma, loc=mean, scale=sigma
        )
        assert got == pytest.approx(ref, abs=1e-9)

    def test_output_within_bounds_and_monotone(self):
        u = np.array([1e-12, 0.1, 0.5, 0.9, 1.0 - 1e-12])
        vals = truncated_normal_ppf(u, 2.0, 0.5, 1.0, 2.5)
        assert np.all(vals >= 1.0)
        assert np.all(vals <= 2.5)
        assert np.all(np.diff(vals) > 0)

    def test_median_of_symmetric_truncation_is_the_mean(self):
        val = truncated_normal_ppf(0.5, 3.0, 1.0, 1.0, 5.0)
        assert float(val) == pytest.approx(3.0, abs=1e-12)

    def test_kolmogorov_distance_of_mapped_uniforms(self):
        mean, sigma, lo, hi = 1.2, 0.4, 0.5, 2.0
        rng = np.random.default_rng(11)
        vals = truncated_normal_ppf(rng.uniform(size=1000), mean, sigma, lo, hi)
        dist = truncnorm((lo - mean) / sigma, (hi - mean) / sigma, loc=mean, scale=sigma)
        assert kstest(vals, dist.cdf).statistic < 0.05


class TestTruncatedMvn:
    def test_truncation_at_three_sigma(self):
        mvn = TruncatedMvn(mean=[1.0, -2.0], cov=[[4.0, 0.0], [0.0, 0.25]])
        assert mvn.sigma.tolist() == [2.0, 0.5]
        assert mvn.lo.tolist() == [-5.0, -3.5]
        assert mvn.hi.tolist() == [7.0, -0.5]

    def test_correlation_has_unit_diagonal(self):
        mvn = TruncatedMvn(mean=[0.0, 0.0], cov=[[4.0, 1.2], [1.2, 1.0]])
        c = mvn.corr()
        assert np.allclose(np.diag(c), 1.0)
        assert c[0, 1] == pytest.approx(1.2 / 2.0)
        assert np.array_equal(c, c.T)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            TruncatedMvn(mean=[0.0, 0.0], cov=np.eye(3))


class TestFitTruncatedMvn:
    def test_mean_is_the_sample_mean(self):
        rng = np.random.default_rng(3)
        data = rng.normal(size=(50, 4)) * [1.0, 2.0, 0.5, 3.0] + [1, 2, 3, 4]
        mvn = fit_truncated_mvn(data)
        assert mvn.mean == pytest.approx(data.mean(axis=0), abs=1e-12)

    def test_constant_column_gets_ridge_variance(self):
        rng = np.random.default_rng(4)
        data = np.column_stack([rng.normal(size=40), np.full(40, 4.2)])
        mvn = fit_truncated_mvn(data)
        assert mvn.cov[1, 1] == pytest.approx(1e-10)
        vals = truncated_normal_ppf(
            np.linspace(0.01, 0.99, 25), mvn.mean[1], mvn.sigma[1], mvn.lo[1], mvn.hi[1]
        )
        assert np.all(np.abs(vals - 4.2) <= 3e-5)

    def test_recovers_synthetic_correlation(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(10_000, 2))
        data = np.column_stack([z[:, 0], 0.9 * z[:, 0] + np.sqrt(1 - 0.81) * z[:, 1]])
        mvn = fit_truncated_mvn(data)
        assert mvn.corr()[0, 1] == pytest.approx(0.9, abs=0.05)

    def test_insufficient_data_rejected(self):
        with pytest.raises(ValueError):
            fit_truncated_mvn(np.ones((1, 3)))
        with pytest.raises(ValueError):
            fit_truncated_mvn(np.ones(5))


class TestImanConover:
    def test_identity_target_decorrelates(self):
        rng = np.random.default_rng(6)
        raw = rng.normal(size=(1000, 2))
        raw[:, 1] = 0.8 * raw[:, 0] + 0.6 * raw[:, 1]
        out = iman_conover(raw, np.eye(2))
        assert abs(spearmanr(out).statistic) < 0.1

    def test_perfect_dependence_gives_identical_rank_order(self):
        rng = np.random.default_rng(7)
        raw = rng.normal(size=(500, 2))
        out = iman_conover(raw, np.array([[1.0, 1.0], [1.0, 1.0]]))
        order0 = np.argsort(out[:, 0])
        order1 = np.argsort(out[:, 1])
        assert np.array_equal(order0, order1)

    def test_marginals_preserved_exactly(self):
        rng = np.random.default_rng(8)
        raw = np.column_stack(
            [rng.exponential(size=300), rng.uniform(size=300), rng.normal(size=300)]
        )
        target = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 1.0]])
        out = iman_conover(raw, target)
        for j in range(3):
            assert np.array_equal(np.sort(out[:, j]), np.sort(raw[:, j]))

    def test_indefinite_target_rejected(self):
        rng = np.random.default_rng(9)
        raw = rng.normal(size=(100, 2))
        with pytest.raises(np.linalg.LinAlgError):
            iman_conover(raw, np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_shape_and_count_validation(self):
        rng = np.random.default_rng(10)
        with pytest.raises(ValueError):
            iman_conover(rng.normal(size=(100, 2)), np.eye(3))
        with pytest.raises(ValueError):
            iman_conover(rng.normal(size=(1, 2)), np.eye(2))

    def test_constant_column_rejected(self):
        raw = np.column_stack([np.arange(50.0), np.ones(50)])
        with pytest.raises(ValueError, match="degenerate"):
            iman_conover(raw, np.eye(2))

    def test_spearman_close_to_fitted_temperature_target(self, region_run, params):
        _, region, _ = region_run
        keep = region.t >= 15.0
        target = fit_truncated_mvn(region.temperatures[keep]).corr()
        rng = np.random.default_rng(7)
        out = iman_conover(rng.normal(size=(1000, region.n_stages)), target)
        rho = spearmanr(out).statistic
        assert np.max(np.abs(rho - target)) < 0.1


@pytest.fixture(scope="module")
def initial_pool(region_run, params):
    _, region, _ = region_run
    return build_initial_pool(region, 128, seed=2, params=params)


@pytest.fixture(scope="module")
def sampled_noise_pool(noise_spec):
    return build_noise_pool(noise_spec, 1024, seed=3)


class TestBuildInitialPool:
    @pytest.fixture
    def pool(self, initial_pool):
        return initial_pool

    def test_pool_size_is_exact(self, pool):
        assert len(pool) == 128
        assert pool.holdups.shape == (128, 25)
        assert pool.compositions.shape == (128, 25)
        assert pool.feed.shape == (128, 3)

    def test_states_are_physical(self, pool):
        assert np.all(pool.compositions >= 0.0)
        assert np.all(pool.compositions <= 1.0)
        assert np.all(pool.holdups > 0.0)
        for i in (0, 63, 127):
            pool.state(i).validate()

    def test_composition_profiles_mostly_monotone(self, pool):
        rising = np.all(np.diff(pool.compositions, axis=1) >= 0.0, axis=1)
        assert np.mean(rising) >= 0.95

    def test_identical_seed_gives_identical_pool(self, region_run, params, pool):
        _, region, _ = region_run
        again = build_initial_pool(region, 128, seed=2, params=params)
        assert np.array_equal(again.holdups, pool.holdups)
        assert np.array_equal(again.compositions, pool.compositions)
        assert np.array_equal(again.feed, pool.feed)

    def test_feed_rows_come_from_the_region_log(self, region_run, pool):
        _, region, _ = region_run
        kept = region.feed[region.t >= 15.0]
        kept_rows = {tuple(row) for row in kept}
        pool_rows = [tuple(row) for row in pool.feed]
        assert all(row in kept_rows for row in pool_rows)
        assert len(set(pool_rows)) > 1

    def test_provenance_metadata(self, pool):
        assert pool.meta["seed"] == 2
        assert pool.meta["size"] == 128
        assert pool.meta["kind"] == "initial"

    def test_full_startup_exclusion_aborts(self, region_run, params):
        _, region, _ = region_run
        with pytest.raises(PoolBuildError, match="no region rows left"):
            build_initial_pool(region, 8, seed=2, params=params, exclude_before=1e6)

    def test_accessors_return_copies(self, pool):
        state = pool.state(0)
        state.M[0] = -99.0
        assert pool.holdups[0, 0] > 0.0
        feed = pool.feed_at(0)
        assert feed.F == pool.feed[0, 0]


class TestBuildNoisePool:
    @pytest.fixture
    def pool(self, sampled_noise_pool):
        return sampled_noise_pool

    def test_all_coordinates_within_bounds(self, pool, noise_spec):
        assert pool.eta.shape == (1024, N_MEAS)
        assert np.all(np.abs(pool.eta) <= noise_spec.bound[None, :])

    def test_temperature_spread_matches_the_noise_model(self, pool):
        temp_slots = list(range(25)) + [SLOT_TF]
        spread = pool.eta[:, temp_slots].std()
        assert abs(spread / 0.2325 - 1.0) < 0.15

    def test_coordinates_follow_the_truncated_normal(self, pool, noise_spec):
        for slot in (0, 12, SLOT_F, SLOT_TF, SLOT_QF, SLOT_M_BOTTOM):
            s = noise_spec.sigma[slot]
            b = noise_spec.bound[slot]
            dist = truncnorm(-b / s, b / s, loc=0.0, scale=s)
            assert kstest(pool.eta[:, slot], dist.cdf).statistic < 0.05

    def test_rebuild_is_bitwise_identical(self, pool, noise_spec):
        again = build_noise_pool(noise_spec, 1024, seed=3)
        assert np.array_equal(again.eta, pool.eta)

    def test_zero_pool_option(self, noise_spec):
        pool = build_noise_pool(noise_spec, 16, seed=3, zero=True)
        assert len(pool) == 16
        assert np.all(pool.eta == 0.0)
        assert pool.meta["kind"] == "zero"


class TestSerialization:
    def test_region_round_trips_exactly(self, region_run, tmp_path):
        _, region, _ = region_run
        path = tmp_path / "region.csv"
        region.to_csv(path)
        back = RegionData.from_csv(path)
        assert np.array_equal(back.t, region.t)
        assert np.array_equal(back.temperatures, region.temperatures)
        assert np.array_equal(back.holdups, region.holdups)
        assert np.array_equal(back.feed, region.feed)

    def test_initial_pool_round_trips_exactly(self, region_run, params, tmp_path):
        _, region, _ = region_run
        pool = build_initial_pool(region, 32, seed=2, params=params)
        path = tmp_path / "pool.csv"
        pool.to_csv(path)
        back = InitialConditionPool.from_csv(path)
        assert np.array_equal(back.holdups, pool.holdups)
        assert np.array_equal(back.compositions, pool.compositions)
        assert np.array_equal(back.feed, pool.feed)
        assert back.meta == {"kind": "initial", "seed": "2", "size": "32"}

    def test_noise_pool_round_trips_exactly(self, noise_spec, tmp_path):
        pool = build_noise_pool(noise_spec, 32, seed=3)
        path = tmp_path / "noise.csv"
        pool.to_csv(path)
        back = NoisePool.from_csv(path)
        assert np.array_equal(back.eta, pool.eta)
        assert back.meta["seed"] == "3"

    def test_single_row_table(self, tmp_path):
        pool = NoisePool(eta=np.linspace(-0.05, 0.05, N_MEAS)[None, :])
        path = tmp_path / "one.csv"
        pool.to_csv(path)
        back = NoisePool.from_csv(path)
        assert back.eta.shape == (1, N_MEAS)
        assert np.array_equal(back.eta, pool.eta)

    def test_region_quantiles_span_the_data(self, region_run):
        _, region, _ = region_run
        q = region.quantiles(qs=(0, 50, 100))
        assert q["temperatures"].shape == (3, region.n_stages)
        assert np.array_equal(q["temperatures"][0], region.temperatures.min(axis=0))
        assert np.array_equal(q["temperatures"][2], region.temperatures.max(axis=0))
        assert np.array_equal(q["holdups"][0], region.holdups.min(axis=0))

    def test_row_count_validation(self):
        with pytest.raises(ValueError):
            RegionData(
                t=np.zeros(3),
                temperatures=np.zeros((4, 25)),
                holdups=np.zeros((4, 25)),
                feed=np.zeros((4, 3)),
            )
        with pytest.raises(ValueError):
            NoisePool(eta=np.zeros((4, 7)))
        with pytest.raises(ValueError):
            InitialConditionPool(
                holdups=np.zeros((4, 25)),
                compositions=np.zeros((3, 25)),
                feed=np.zeros((4, 3)),
            )
