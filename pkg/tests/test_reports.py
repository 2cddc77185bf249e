import numpy as np
import pytest

from pnrcount import adapters, reports
from pnrcount.ensemble import summarize
from pnrcount.shots import ShotTable
from pnrcount.sim import StateEntry


@pytest.fixture
def table(rng):
    n = 50
    return ShotTable(
        np.arange(n),
        rng.gamma(3.0, 100.0, n),
        rng.uniform(0, 2, n),
        rng.integers(0, 900, n),
        np.zeros(n, dtype=np.int64),
    )


class TestCsv:
    def test_units_line_and_header(self, tmp_path):
        path = tmp_path / "a.csv"
        reports.write_csv(path, ("x", "y"), ("ps", "photons"), [(1, 0.1), (2, float("nan"))])
        lines = path.read_text().splitlines()
        assert lines[0] == "# units: ps,photons"
        assert lines[1] == "x,y"
        assert lines[3] == "2,nan"

    def test_unit_count_must_match(self, tmp_path):
        with pytest.raises(ValueError):
            reports.write_csv(tmp_path / "a.csv", ("x", "y"), ("ps",), [])

    def test_shot_table_exact_round_trip(self, tmp_path, table):
        path = tmp_path / "s.csv"
        reports.write_shot_table(path, table)
        back = reports.read_shot_table(path)
        for name in ("shot_index", "measured_mean", "measured_std", "clicks", "out_of_window_tags"):
            np.testing.assert_array_equal(getattr(back, name), getattr(table, name))

    def test_manifest_round_trip(self, tmp_path):
        entries = [StateEntry(0, 0.0, 0, 10), StateEntry(1, 123.5, 10, 10)]
        path = tmp_path / "m.csv"
        reports.write_manifest(path, entries)
        assert reports.read_manifest(path) == entries

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "m.csv"
        reports.write_csv(path, ("state_index",), ("count",), [(0,)])
        with pytest.raises(ValueError, match="missing column"):
            reports.read_manifest(path)

    def test_empty_and_ragged(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("# units: x\n")
        with pytest.raises(ValueError, match="empty"):
            reports.read_csv(path)
        path.write_text("a,b\n1,2\n3\n")
        with pytest.raises(ValueError, match="ragged"):
            reports.read_csv(path)

    def test_click_table_marks_unbounded(self, tmp_path):
        path = tmp_path / "c.csv"
        reports.write_click_table(path, [(8, None), (28, 10)])
        assert reports.read_csv(path)["n_max"].tolist() == [-1, 10]


class TestPlots:
    def test_render(self, tmp_path, table):
        pytest.importorskip("matplotlib")
        summaries = [summarize(table.measured_mean[:25], 600.0), summarize(table.measured_mean[25:], 600.0)]
        made = reports.render_plots(tmp_path, summaries, table)
        assert len(made) == 4
        assert all(p.stat().st_size > 1000 for p in made)


class TestAdapters:
    def test_vendor_formats_unsupported(self, tmp_path):
        with pytest.raises(NotImplementedError):
            adapters.read_vendor_tags(tmp_path / "x", trigger_channel=0, click_channels=[1])
        with pytest.raises(NotImplementedError):
            adapters.read_published_dataset(tmp_path / "x")
