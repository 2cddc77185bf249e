import io

import numpy as np
import pytest
from scipy import optimize, stats

from pnrcount.lut import (
    Lut,
    LutBank,
    LutCoverageError,
    PhotonNumberDistribution,
    build_lut,
    load_lut,
    lookup,
    read_lut,
    save_lut,
    write_lut,
)
from pnrcount.timing import BinTimingModel, emg_logpdf, family_model


@pytest.fixture(scope="module")
def lut(default_model):
    return build_lut(default_model)


class TestPhotonNumberDistribution:
    def test_moments(self):
        p = PhotonNumberDistribution([0.25, 0.5, 0.25])
        assert p.mean == 1.0
        assert p.variance == 0.5
        assert p.support_max == 2

    def test_vacuum(self):
        v = PhotonNumberDistribution.vacuum()
        assert v.mean == 0.0 and v.variance == 0.0
        np.testing.assert_array_equal(np.asarray(v), [1.0])

    @pytest.mark.parametrize("bad", [[], [0.5, 0.4], [1.2, -0.2], [np.nan, 1.0]])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            PhotonNumberDistribution(bad)

    def test_immutable(self):
        p = PhotonNumberDistribution([0.5, 0.5])
        with pytest.raises(ValueError):
            p.probs[0] = 1.0


class TestBuildLut:
    def test_rows_normalized_on_4096_grid(self, default_model):
        big = build_lut(default_model, grid_origin=-100.0, grid_step=0.25, grid_len=4096)
        np.testing.assert_allclose(big.rows.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(big.rows[:, 0] == 0.0)

    def test_isolated_component(self):
        # n=1 component 40 sigma away from n=2
        model = BinTimingModel.from_arrays([400.0, 100.0], [5.0, 5.0], [2.0, 2.0], [0.5, 0.5])
        lut = build_lut(model, 0.0, 1.0, 600)
        k, _ = lut.row_index(400.0)
        assert lut.rows[k, 1] >= 1 - 1e-6

    def test_equal_posterior_at_density_crossing(self):
        # identical shapes shifted by 100 ps; the crossing point comes from scipy
        model = BinTimingModel.from_arrays([300.0, 200.0], [10.0, 10.0], [5.0, 5.0], [0.5, 0.5])
        lut = build_lut(model, 0.0, 0.5, 1200)
        d1 = stats.exponnorm(K=0.5, loc=300.0, scale=10.0)
        d2 = stats.exponnorm(K=0.5, loc=200.0, scale=10.0)
        cross = optimize.brentq(lambda t: d1.logpdf(t) - d2.logpdf(t), 200.0, 310.0, xtol=1e-12)
        k = int(round(cross / 0.5))
        row = np.asarray(lookup(lut, k * 0.5))
        expect = 1.0 / (1.0 + np.exp(d2.logpdf(k * 0.5) - d1.logpdf(k * 0.5)))
        np.testing.assert_allclose(row[1], expect, rtol=1e-9)
        assert abs(row[1] - 0.5) < 0.05

    def test_midpoint_of_near_gaussian_pair(self):
        # the midpoint rule is exact only for symmetric shapes, so use a tiny tail
        model = BinTimingModel.from_arrays([300.0, 200.0], [10.0, 10.0], [1e-4, 1e-4], [0.5, 0.5])
        lut = build_lut(model, 0.0, 0.5, 1200)
        row = np.asarray(lookup(lut, 0.5 * (300.0 + 200.0) + 1e-4))
        np.testing.assert_allclose(row[1:], [0.5, 0.5], atol=1e-3)

    def test_density_ratio_at_150ps(self, lut, default_model):
        row = np.asarray(lookup(lut, 150.0))
        lp = np.array([emg_logpdf(150.0, default_model.params(n)) for n in range(1, 16)])
        direct = np.exp(lp - lp.max())
        direct /= direct.sum()
        assert np.count_nonzero(row > 1e-3) >= 2
        np.testing.assert_allclose(row[1:], direct, atol=1e-9)

    def test_posterior_ratio_identity(self, lut, default_model):
        k = 180
        t = lut.grid[k]
        lp = np.array([emg_logpdf(t, default_model.params(n)) for n in range(1, 16)])
        row = lut.rows[k, 1:]
        good = row > 1e-200
        n, m = np.flatnonzero(good)[:2]
        np.testing.assert_allclose(row[n] / row[m], np.exp(lp[n] - lp[m]), rtol=1e-9)

    def test_prior_flatness(self, default_model):
        w = np.random.default_rng(0).uniform(0.1, 2.0, 15)
        flat = build_lut(default_model, 0.0, 1.0, 450)
        weighted = build_lut(default_model, 0.0, 1.0, 450, prior=w)
        expect = flat.rows[:, 1:] * w
        expect /= expect.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(weighted.rows[:, 1:], expect, atol=1e-12)

    def test_coverage_error_lists_components(self, default_model):
        with pytest.raises(LutCoverageError) as info:
            build_lut(default_model, 0.0, 1.0, 200)
        assert 1 in [n for n, _ in info.value.uncovered]

    def test_degenerate_rows_copy_nearest(self):
        model = BinTimingModel.from_arrays([300.0, 250.0], [2.0, 2.0], [1.0, 0.5], [0.5, 0.5])
        lut = build_lut(model, 0.0, 1.0, 1500)
        assert lut.degenerate[0] and lut.degenerate[-1]
        first_good = np.flatnonzero(~lut.degenerate)[0]
        last_good = np.flatnonzero(~lut.degenerate)[-1]
        np.testing.assert_array_equal(lut.rows[0], lut.rows[first_good])
        np.testing.assert_array_equal(lut.rows[-1], lut.rows[last_good])
        assert np.all(np.isfinite(lut.rows))


class TestLookup:
    def test_no_click_is_vacuum(self, lut):
        v = lookup(lut, None)
        np.testing.assert_array_equal(np.asarray(v), [1.0])
        assert v.mean == 0.0 and v.variance == 0.0

    def test_exact_grid_hit(self, lut):
        for k in (0, 17, 333, lut.grid_len - 1):
            t = lut.grid_origin + k * lut.grid_step
            np.testing.assert_array_equal(np.asarray(lookup(lut, t)), lut.rows[k])

    def test_out_of_range_counted(self, default_model):
        lut = build_lut(default_model, 0.0, 1.0, 450)
        before = lut.out_of_range
        np.testing.assert_array_equal(np.asarray(lookup(lut, -50.0)), lut.rows[0])
        np.testing.assert_array_equal(np.asarray(lookup(lut, 1e4)), lut.rows[-1])
        assert lut.out_of_range == before + 2

    def test_row_moments_tables(self, lut):
        n = np.arange(lut.n_cap + 1)
        k = 250
        np.testing.assert_allclose(lut.row_mean[k], lut.rows[k] @ n)
        np.testing.assert_allclose(lut.row_var[k], lut.rows[k] @ (n - lut.row_mean[k]) ** 2, atol=1e-15)


class TestLutFiles:
    def test_binary_round_trip(self, lut, tmp_path):
        path = tmp_path / "a.lut"
        save_lut(path, lut)
        back = load_lut(path)
        assert back.same_grid(lut)
        np.testing.assert_array_equal(back.rows, lut.rows)

    def test_truncated_body(self, lut):
        buf = io.BytesIO()
        write_lut(buf, lut)
        raw = buf.getvalue()[:-8]
        with pytest.raises(ValueError, match="truncated"):
            read_lut(io.BytesIO(raw))

    def test_bank_round_trip(self, tmp_path, default_model):
        other = family_model(15, t0=320.0)
        bank = LutBank.from_models([default_model, other] * 512, grid_origin=0.0, grid_step=1.0, grid_len=450)
        assert len(bank.tables) == 2 and len(bank) == 1024
        path = tmp_path / "bank.bin"
        bank.save(path)
        back = LutBank.load(path)
        np.testing.assert_array_equal(back.index, bank.index)
        np.testing.assert_array_equal(back[1].rows, bank[1].rows)

    def test_summary_mentions_grid(self, lut):
        text = lut.summary()
        assert "n_cap 15" in text and "n=1" in text

    def test_rejects_unnormalized_rows(self):
        with pytest.raises(ValueError):
            Lut(0.0, 1.0, np.array([[0.0, 0.5, 0.4]]))
