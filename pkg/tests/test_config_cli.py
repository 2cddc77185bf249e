import json

import numpy as np
import pytest

from pnrcount import reports
from pnrcount.cli import main
from pnrcount.config import OUTPUT_DIR_ENV, RunConfig, SchemaError, config_from_dict, dump_config, load_config
from pnrcount.detector import N_BINS
from pnrcount.ensemble import summarize
from pnrcount.lut import LutBank, build_lut
from pnrcount.shots import measure_outcomes
from pnrcount.sim import default_schedule, iter_state_batches
from pnrcount.timing import load_models


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        det = cfg.detector_config()
        assert det.rep_period_ps == 12_500_000
        assert cfg.incident_means()[-1] == 15393
        assert cfg.lut_grid() == dict(grid_origin=0.0, grid_step=1.0, grid_len=450)

    def test_round_trip_through_yaml(self, tmp_path):
        cfg = config_from_dict({"detector": {"dark_rate_hz": 0, "n_cap": 10}, "simulation": {"seed": 9}})
        path = tmp_path / "c.yaml"
        path.write_text(dump_config(cfg))
        back = load_config(path)
        assert back.to_dict() == cfg.to_dict()
        assert back.detector_config().n_cap == 10

    @pytest.mark.parametrize(
        "doc,match",
        [
            ({"detecter": {}}, "unknown section"),
            ({"detector": {"window_ps": 3}}, "unknown key"),
            ({"detector": {"n_cap": "ten"}}, "integer"),
            ({"detector": {"rep_rate_hz": True}}, "number"),
            ({"analysis": {"fit_family": 1}}, "true/false"),
            ({"detector": []}, "mapping"),
            ([1, 2], "root"),
        ],
    )
    def test_schema_errors(self, doc, match):
        with pytest.raises(SchemaError, match=match):
            config_from_dict(doc)

    def test_invalid_physics_is_schema_error(self):
        cfg = config_from_dict({"detector": {"temporal_spacing_ps": 100_000}})
        with pytest.raises(SchemaError, match="repetition period"):
            cfg.detector_config()

    def test_output_dir_from_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
        assert RunConfig().output_dir() == tmp_path
        cfg = config_from_dict({"paths": {"output_dir": "elsewhere"}})
        assert str(cfg.output_dir()) == "elsewhere"


class TestClickTableCommand:
    def test_resolution_table(self, capsys):
        code, out, _ = run(["click-table", "--bins", "28,100,1024"], capsys)
        assert code == 0
        assert out.splitlines() == ["bins,n_max", "28,10", "100,16", "1024,47"]

    def test_csv_output(self, tmp_path, capsys):
        path = tmp_path / "t.csv"
        code, _, _ = run(["click-table", "--bins", "28", "--out", path], capsys)
        assert code == 0
        cols = reports.read_csv(path)
        assert cols["n_max"].tolist() == [10]

    def test_detectors_for_unit_sigma(self, capsys):
        code, out, _ = run(["click-table", "--bins", "28", "--photons", "276"], capsys)
        assert code == 0
        assert "n=276: 3749" in out


class TestPipeline:
    def test_vacuum_run(self, tmp_path, capsys):
        code, _, _ = run(
            ["simulate", "--incident-mean", "0", "--shots", "100", "--out-dir", tmp_path, "--set", "detector.dark_rate_hz=0"],
            capsys,
        )
        assert code == 0
        code, out, _ = run(["analyze", "--tags", tmp_path / "tags.bin", "--out-dir", tmp_path], capsys)
        assert code == 0
        assert json.loads(out)["shots"] == 100
        table = reports.read_shot_table(tmp_path / "shots.csv")
        assert np.all(table.measured_mean == 0) and np.all(table.measured_std == 0)

    def test_report_equals_library(self, tmp_path, capsys):
        seed, states, shots = 3, 25, 400
        args = ["--out-dir", tmp_path, "--set", f"simulation.seed={seed}"]
        assert run(["simulate", "--states", states, "--shots", shots, *args], capsys)[0] == 0
        assert run(["analyze", "--tags", tmp_path / "tags.bin", *args], capsys)[0] == 0
        code, out, _ = run(
            ["ensemble-report", "--shots", tmp_path / "shots.csv", "--manifest", tmp_path / "manifest.csv", *args], capsys
        )
        assert code == 0

        cfg = RunConfig()
        det = cfg.detector_config()
        bank = LutBank.uniform(build_lut(det.timing_models[0], **cfg.lut_grid()), N_BINS)
        means = default_schedule(states)
        per_state = [[] for _ in range(states)]
        clicks = [[] for _ in range(states)]
        for d, batch in iter_state_batches(seed, means, shots, det, cfg.simulation.chunk_shots):
            m, _, c, _ = measure_outcomes(batch.outcomes, bank)
            per_state[d].append(m)
            clicks[d].append(c)
        summaries = [
            summarize(np.concatenate(x), float(mu), clicks=np.concatenate(c)) for x, c, mu in zip(per_state, clicks, means)
        ]
        reports.write_ensemble(tmp_path / "library.csv", summaries)
        assert (tmp_path / "library.csv").read_bytes() == (tmp_path / "ensemble.csv").read_bytes()
        assert (tmp_path / "sigma_report.csv").exists() and (tmp_path / "blinding_curve.csv").exists()
        assert "weighted_g2" in json.loads(out)

    def test_fit_lut_then_analyze(self, tmp_path, capsys):
        args = ["--out-dir", tmp_path]
        assert run(["simulate", "--incident-mean", "3000", "--shots", 300, *args], capsys)[0] == 0
        code, out, _ = run(["fit-lut", "--tags", tmp_path / "tags.bin", *args], capsys)
        assert code == 0, out
        info = json.loads(out)
        assert info["tables"] == 1 and 0 <= info["pooled_chi2_p"] <= 1
        (model,) = set(load_models(tmp_path / "models.json"))
        p = model.params(1)
        assert abs(p.mu - 330.0) < 0.3 and abs(p.sigma / 8.0 - 1) < 0.02 and abs(p.tau / 12.0 - 1) < 0.02
        code, _, _ = run(["analyze", "--tags", tmp_path / "tags.bin", "--luts", tmp_path / "luts.bin", *args], capsys)
        assert code == 0
        table = reports.read_shot_table(tmp_path / "shots.csv")
        # default blinding removes a fraction 1 - exp(-2e-5 * 3000) of the bins
        assert abs(table.measured_mean.mean() / (1500 * np.exp(-0.06)) - 1) < 0.01

    def test_report_json_is_strict(self, tmp_path, capsys):
        # low means never reach std >= 1, so the boundary is unbounded
        args = ["--out-dir", tmp_path]
        run(["simulate", "--states", 3, "--max-mean", 20, "--shots", 50, *args], capsys)
        run(["analyze", "--tags", tmp_path / "tags.bin", *args], capsys)
        code, out, _ = run(["ensemble-report", "--shots", tmp_path / "shots.csv", "--manifest", tmp_path / "manifest.csv", *args], capsys)
        assert code == 0

        def reject(token):
            raise AssertionError(f"non-standard JSON constant {token}")

        assert json.loads(out, parse_constant=reject)["sub_sigma_boundary"] is None

    def test_reruns_identical(self, tmp_path, capsys):
        digests = []
        for k in range(2):
            out = tmp_path / str(k)
            args = ["--out-dir", out]
            run(["simulate", "--states", 4, "--shots", 50, *args], capsys)
            run(["analyze", "--tags", out / "tags.bin", *args], capsys)
            digests.append([(out / f).read_bytes() for f in ("tags.bin", "truth.bin", "manifest.csv", "shots.csv")])
        assert digests[0] == digests[1]

    def test_tomography_command(self, tmp_path, capsys):
        args = ["--out-dir", tmp_path, "--set", "detector.blinding_alpha_per_photon=0"]
        run(["simulate", "--states", 6, "--max-mean", 40, "--shots", 300, *args], capsys)
        run(["analyze", "--tags", tmp_path / "tags.bin", *args], capsys)
        base = ["tomography", "--shots", tmp_path / "shots.csv", "--manifest", tmp_path / "manifest.csv", *args]
        code, out, err = run(base + ["--max-iter", 3], capsys)
        assert code == 5
        assert json.loads(err)["error"] == "not-converged"
        assert (tmp_path / "povm.bin").exists() and (tmp_path / "diagnostics.csv").exists()
        code, out, _ = run(base, capsys)
        assert code == 0
        info = json.loads(out)
        assert info["converged"] and info["constraint_violation"] <= 1e-8


class TestExitCodes:
    def test_usage(self, capsys):
        code, _, err = run(["simulate", "--shots", "many"], capsys)
        assert code == 2 and json.loads(err)["error"] == "usage"
        code, _, _ = run([], capsys)
        assert code == 2

    def test_missing_input(self, tmp_path, capsys):
        code, _, err = run(["analyze", "--tags", tmp_path / "nope.bin", "--out-dir", tmp_path], capsys)
        assert code == 2 and json.loads(err)["error"] == "missing-input"

    def test_schema(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("detector:\n  colour: red\n")
        code, _, err = run(["simulate", "--config", bad, "--out-dir", tmp_path], capsys)
        assert code == 3 and json.loads(err)["error"] == "schema"
        code, _, _ = run(["simulate", "--set", "detector.n_cap=x", "--out-dir", tmp_path], capsys)
        assert code == 3

    def test_bad_data(self, tmp_path, capsys):
        junk = tmp_path / "junk.bin"
        junk.write_bytes(b"not a tag file at all, definitely not")
        code, _, err = run(["analyze", "--tags", junk, "--out-dir", tmp_path], capsys)
        assert code == 4 and json.loads(err)["error"] == "data"
        assert "byte offset 0" in json.loads(err)["message"]
