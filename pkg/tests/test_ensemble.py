import math

import numpy as np
import pytest
from scipy.stats import poisson

from pnrcount.detector import DetectorConfig, ideal_config
from pnrcount.ensemble import (
    EnsembleSummary,
    MomentAccumulator,
    blinded_variance_curve,
    capped_poisson_moments,
    click_table,
    detectors_for_unit_sigma,
    efficiency_click,
    efficiency_pnr,
    fock_click_stats,
    g2_standard_error,
    g2_zero,
    n_max_click,
    relative_noise_db,
    sigma_report,
    sub_poisson_fraction,
    sub_sigma_boundary,
    summarize,
    weighted_g2,
    zero_inflate,
    zero_inflated_moments,
)
from pnrcount.lut import LutBank, PhotonNumberDistribution, build_lut
from pnrcount.shots import measure_outcomes
from pnrcount.sim import simulate_batch
from pnrcount.timing import family_model


def occupancy_samples(B, n, trials, rng, chunk=100_000):
    """Number of distinct bins hit when n photons land uniformly in B bins."""
    out = []
    for start in range(0, trials, chunk):
        m = min(chunk, trials - start)
        hits = np.sort(rng.integers(0, B, size=(m, n)), axis=1)
        out.append(1 + np.count_nonzero(np.diff(hits, axis=1), axis=1))
    return np.concatenate(out).astype(float)


class TestScalarFormulas:
    def test_g2_poisson(self):
        assert g2_zero(7.0, 7.0) == 1.0

    def test_g2_number_state(self):
        assert g2_zero(5.0, 0.0) == pytest.approx(0.8)

    def test_g2_rejects_nonpositive_mean(self):
        with pytest.raises(ValueError):
            g2_zero(0.0, 1.0)

    def test_noise_poisson_limit(self):
        assert relative_noise_db(9.0, 3.0) == 0.0

    @pytest.mark.parametrize("mean,std,db", [(276, 1.02, -12.1), (2329, 8.58, -7.5)])
    def test_noise_anchors(self, mean, std, db):
        assert abs(relative_noise_db(mean, std) - db) <= 0.05

    def test_noise_errors(self):
        with pytest.raises(ValueError):
            relative_noise_db(0.0, 1.0)
        with pytest.raises(ValueError):
            relative_noise_db(1.0, -1.0)

    def test_efficiencies(self):
        assert efficiency_pnr(5, 10) == 0.5
        assert efficiency_pnr(0, 10) == 0.0
        assert efficiency_click(math.exp(-0.5), 1.0) == pytest.approx(0.5, rel=1e-15)
        assert efficiency_click(1.0, 42.0) == 0.0
        with pytest.raises(ValueError):
            efficiency_click(0.0, 1.0)
        with pytest.raises(ValueError):
            efficiency_pnr(1.0, 0.0)


class TestClickStatistics:
    def test_single_bin(self):
        assert fock_click_stats(1, 3) == (1.0, 0.0)

    def test_textbook_form(self):
        # closed form written out directly, fine at small B
        for B, n in [(2, 5), (8, 3), (28, 10), (100, 16)]:
            a = (1 - 1 / B) ** n
            var = B * (B - 1) * (1 - 2 / B) ** n + B * a - B * B * a * a
            mean, v = fock_click_stats(B, n)
            np.testing.assert_allclose(mean, B * (1 - a), rtol=1e-12)
            np.testing.assert_allclose(v, var, rtol=1e-9, atol=1e-12)

    def test_example_variances(self):
        assert fock_click_stats(28, 10)[1] == pytest.approx(0.954, abs=0.01)
        assert fock_click_stats(1024, 47)[1] <= 1.0
        assert fock_click_stats(1024, 48)[1] > 1.0

    @pytest.mark.parametrize("B,n", [(8, 3), (28, 10), (100, 16), (1024, 47)])
    def test_monte_carlo_occupancy(self, B, n):
        x = occupancy_samples(B, n, 10**6, np.random.default_rng(B))
        acc = MomentAccumulator.of(x)
        mean, var = fock_click_stats(B, n)
        se_mean = math.sqrt(acc.variance / acc.n)
        se_var = math.sqrt(max(acc.central(4) - acc.variance**2, 0.0) / acc.n)
        assert abs(acc.mean - mean) <= 4 * se_mean
        assert abs(acc.variance - var) <= 4 * se_var

    def test_table_values(self):
        assert [n_max_click(B) for B in (28, 100, 1024)] == [10, 16, 47]
        assert click_table((28, 100, 1024)) == [(28, 10), (100, 16), (1024, 47)]

    def test_small_detectors_never_exceed_unit_sigma(self):
        for B in range(1, 10):
            assert n_max_click(B) is None
        assert n_max_click(10) is not None

    def test_n_max_monotone(self):
        # just above B = 9 the peak std barely crosses 1, so n_max dips at B = 11 and 13
        assert [n_max_click(B) for B in range(10, 14)] == [10, 9, 9, 8]
        values = [n_max_click(B) for B in range(13, 1100)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_detectors_for_unit_sigma(self):
        assert detectors_for_unit_sigma(1) == 1
        assert detectors_for_unit_sigma(47) <= 1024
        B = detectors_for_unit_sigma(276)
        assert abs(B - 3.7e4) <= 0.05 * 3.7e4
        assert fock_click_stats(B, 276)[1] <= 1.0
        assert fock_click_stats(B - 1, 276)[1] > 1.0


class TestZeroInflation:
    def test_limits(self):
        p = PhotonNumberDistribution([0.2, 0.5, 0.3])
        np.testing.assert_array_equal(np.asarray(zero_inflate(p, 0.0)), np.asarray(p))
        np.testing.assert_array_equal(np.asarray(zero_inflate(p, 1.0)), [1.0, 0.0, 0.0])

    def test_moment_algebra(self, rng):
        for _ in range(10):
            raw = rng.random(12)
            p = PhotonNumberDistribution(raw / raw.sum())
            b = rng.random()
            q = zero_inflate(p, b)
            m, v = zero_inflated_moments(p.mean, p.variance, b)
            np.testing.assert_allclose([q.mean, q.variance], [m, v], rtol=1e-12)

    def test_capped_poisson(self):
        lam = np.array([0.0, 0.3, 5.0, 40.0])
        mean, var = capped_poisson_moments(lam, 3)
        for i, l in enumerate(lam):
            k = np.arange(400)
            pmf = poisson.pmf(k, l)
            c = np.minimum(k, 3)
            np.testing.assert_allclose(mean[i], c @ pmf, atol=1e-12)
            np.testing.assert_allclose(var[i], (c - c @ pmf) ** 2 @ pmf, atol=1e-12)


class TestBlindedCurve:
    def test_no_blinding_is_poisson_line(self):
        config = ideal_config()
        means = np.linspace(0, 15393, 30)
        m, v = blinded_variance_curve(means, config)
        np.testing.assert_allclose(v, m, rtol=0, atol=1e-9)
        np.testing.assert_allclose(m, 0.5 * means, rtol=1e-12)

    def test_blinding_adds_variance(self):
        config = DetectorConfig()
        means = np.linspace(1, 15393, 50)
        m, v = blinded_variance_curve(means, config)
        assert np.all(v >= m)
        _, vc = blinded_variance_curve(means, config, capped=True)
        assert np.all(vc >= 0)

    def test_departure_near_one_thousand(self):
        config = DetectorConfig()
        m, v = blinded_variance_curve(np.array([200.0, 2000.0, 15000.0]), config)
        ratio = v / m
        assert ratio[0] < 1.01
        assert ratio[2] > 1.5

    def test_monte_carlo_matches(self, rng):
        config = DetectorConfig(dark_rate_hz=0.0)
        for nbar in (3000.0, 12000.0):
            batch = simulate_batch(rng, nbar, config, 4000)
            total = batch.truth.detected.sum(axis=1).astype(float)
            acc = MomentAccumulator.of(total)
            m, v = blinded_variance_curve([nbar], config, capped=True)
            se_m = math.sqrt(acc.variance / acc.n)
            se_v = math.sqrt((acc.central(4) - acc.variance**2) / acc.n)
            assert abs(acc.mean - m[0]) <= 3 * se_m
            assert abs(acc.variance - v[0]) <= 3 * se_v


class TestMomentAccumulator:
    def test_matches_numpy(self, rng):
        x = rng.gamma(2.0, 3.0, 5000)
        acc = MomentAccumulator.of(x)
        assert acc.n == 5000
        np.testing.assert_allclose(acc.mean, x.mean(), rtol=1e-13)
        np.testing.assert_allclose(acc.variance, x.var(ddof=1), rtol=1e-12)
        for k in (3, 4):
            np.testing.assert_allclose(acc.central(k), np.mean((x - x.mean()) ** k), rtol=1e-10)

    def test_merge_any_order(self, rng):
        x = rng.normal(100.0, 7.0, 3000)
        parts = [MomentAccumulator.of(p) for p in np.array_split(x, [10, 900, 901, 2500])]
        whole = MomentAccumulator.of(x)
        fwd = parts[0]
        for p in parts[1:]:
            fwd = fwd + p
        rev = parts[-1]
        for p in parts[-2::-1]:
            rev = p + rev
        tree = (parts[0] + parts[1]) + ((parts[2] + parts[3]) + parts[4])
        for acc in (fwd, rev, tree):
            assert acc.n == whole.n
            np.testing.assert_allclose(
                [acc.mean, acc.m2, acc.m3, acc.m4], [whole.mean, whole.m2, whole.m3, whole.m4], rtol=1e-9
            )

    def test_empty_is_identity(self):
        acc = MomentAccumulator.of([1.0, 2.0])
        assert (acc + MomentAccumulator()).mean == acc.mean
        assert (MomentAccumulator() + acc).m2 == acc.m2

    def test_g2_standard_error_calibrated(self):
        rng = np.random.default_rng(3)
        samples = rng.poisson(50.0, size=(400, 2000))
        g2 = np.array([g2_zero(s.mean(), s.var(ddof=1)) for s in samples])
        se = np.median([g2_standard_error(MomentAccumulator.of(s)) for s in samples])
        np.testing.assert_allclose(g2.std(), se, rtol=0.1)


class TestSummaries:
    def test_summary_fields(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        s = summarize(x, 5.0, clicks=np.array([0, 1, 2, 3]))
        assert s.shots == 4
        assert s.measured_mean == 2.5
        np.testing.assert_allclose(s.measured_variance, x.var(ddof=1))
        assert s.g2 == pytest.approx(g2_zero(2.5, x.var(ddof=1)))
        assert s.efficiency == 0.5
        assert s.efficiency_click == pytest.approx(-math.log(0.25) / 5.0)
        assert len(s.row()) == len(EnsembleSummary.CSV_COLUMNS)

    def test_vacuum_state_is_nan(self):
        s = summarize(np.zeros(10), 0.0)
        assert math.isnan(s.g2) and math.isnan(s.noise_db) and math.isnan(s.efficiency)

    def test_invariants(self):
        with pytest.raises(ValueError):
            EnsembleSummary(1.0, 1.0, 1.0, 0, 1.0, 0.1, 0.0, 0.5)
        with pytest.raises(ValueError):
            EnsembleSummary(1.0, 1.0, -1.0, 1, 1.0, 0.1, 0.0, 0.5)

    def test_weighted_g2(self):
        a = EnsembleSummary(1, 1, 1, 10, 1.1, 0.1, 0, 0.5)
        b = EnsembleSummary(1, 1, 1, 10, 0.9, 0.2, 0, 0.5)
        nan = EnsembleSummary(0, 0, 0, 10, math.nan, math.nan, math.nan, math.nan)
        g, e = weighted_g2([a, b, nan])
        np.testing.assert_allclose(g, (1.1 / 0.01 + 0.9 / 0.04) / (1 / 0.01 + 1 / 0.04))
        np.testing.assert_allclose(e, 1 / math.sqrt(1 / 0.01 + 1 / 0.04))
        with pytest.raises(ValueError):
            weighted_g2([nan])

    def test_sigma_report(self):
        mean = np.array([0.9, 1.1, 1.0, 2.2, 2.4])
        std = np.array([0.1, 0.3, 0.2, 0.5, 0.7])
        bands = sigma_report(mean, std)
        assert [b.measured_n for b in bands] == [1, 2]
        assert bands[0].shots == 3 and bands[0].median == pytest.approx(0.2)
        assert bands[1].lower <= bands[1].median <= bands[1].upper

    def test_boundary_and_fraction(self):
        mean = np.array([0.5, 10.0, 250.0, 300.0, 280.0])
        std = np.array([0.1, 0.2, 0.99, 1.2, 1.0])
        assert sub_sigma_boundary(mean, std) == 280.0
        assert sub_sigma_boundary(mean[:3], std[:3]) == math.inf
        assert sub_poisson_fraction(mean, std) == 1.0
        assert math.isnan(sub_poisson_fraction([0.0], [0.0]))


class TestSimulatedEnsembles:
    def test_efficiency_modes_agree_at_low_mean(self, window_bank, ideal):
        rng = np.random.default_rng(11)
        means, clicks = [], []
        for _ in range(10):
            batch = simulate_batch(rng, 2.0, ideal, 10_000)
            m, _, c, _ = measure_outcomes(batch.outcomes, window_bank)
            means.append(m)
            clicks.append(c)
        s = summarize(np.concatenate(means), 2.0, clicks=np.concatenate(clicks))
        assert abs(s.efficiency - 0.5) <= 0.01
        assert abs(s.efficiency_click / s.efficiency - 1) <= 0.02

    def test_ideal_variance_tracks_mean(self, window_bank, ideal):
        rng = np.random.default_rng(5)
        batch = simulate_batch(rng, 1000.0, ideal, 5000)
        m, _, _, _ = measure_outcomes(batch.outcomes, window_bank)
        acc = MomentAccumulator.of(m)
        truth = MomentAccumulator.of(batch.truth.detected.sum(axis=1))
        se = g2_standard_error(acc)
        # the pipeline adds almost nothing on top of the sampled photon numbers
        assert abs(g2_zero(acc.mean, acc.variance) - g2_zero(truth.mean, truth.variance)) <= 0.2 * se
        assert abs(g2_zero(acc.mean, acc.variance) - 1) <= 4 * se

    def test_single_photon_noise_floor_without_darks(self):
        # well separated components: a lone click is unambiguous
        model = family_model(15, sigma0=1.0, tau0=0.5)
        config = ideal_config(timing_models=(model,))
        bank = LutBank.uniform(build_lut(model, 0.0, 1.0, 450), 1024)
        batch = simulate_batch(np.random.default_rng(2), 2.0, config, 20_000)
        m, s, c, _ = measure_outcomes(batch.outcomes, bank)
        one = (c == 1) & (batch.truth.detected.sum(axis=1) == 1)
        assert one.sum() > 1000
        np.testing.assert_allclose(m[one], 1.0, atol=1e-9)
        assert np.all(s[one] <= 1e-9)
