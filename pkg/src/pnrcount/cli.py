"""Command-line entry point: ``pnrcount <command> [options]``.

Exit status: 0 success, 2 usage or missing input, 3 configuration schema error,
4 invalid data or file format, 5 tomography did not converge (outputs are still
written). Failures print one JSON object ``{"error": category, "message": ...}``
to stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from pnrcount import ensemble, reports, tomography
from pnrcount.config import OUTPUT_DIR_ENV, RunConfig, SchemaError, config_from_dict, load_config
from pnrcount.detector import N_BINS, NO_CLICK
from pnrcount.lut import LutBank, LutCoverageError
from pnrcount.shots import MissingTriggerError, analyze_tag_file, iter_assigned
from pnrcount.sim import simulate_run
from pnrcount.tagio import TagFormatError
from pnrcount.timing import ArrivalHistogram, FitError, fit_mixture, load_models, save_models

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_DATA = 4
EXIT_NOT_CONVERGED = 5


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}", EXIT_USAGE)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _input(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing-input", f"input file not found: {p}", EXIT_USAGE)
    return p


def _load_run_config(args) -> RunConfig:
    cfg = load_config(_input(args.config)) if args.config else RunConfig()
    if args.set:
        doc = cfg.to_dict()
        for item in args.set:
            key, sep, raw = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot:
                raise CliError("usage", f"--set expects section.key=value, got {item!r}", EXIT_USAGE)
            doc.setdefault(section, {})[name] = yaml.safe_load(raw)
        cfg = config_from_dict(doc)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out_dir) if args.out_dir else cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _json_safe(obj):
    # strict JSON has no inf/nan; undefined or unbounded values become null
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _emit(obj) -> None:
    print(json.dumps(_json_safe(obj), sort_keys=True, allow_nan=False))


# --- commands --------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    if args.seed is not None:
        cfg.simulation.seed = args.seed
    if args.incident_mean is not None:
        cfg.schedule.incident_means = args.incident_mean
    if args.states is not None:
        cfg.schedule.n_states = args.states
    if args.max_mean is not None:
        cfg.schedule.max_incident_mean = args.max_mean
    if args.shots is not None:
        cfg.schedule.shots_per_state = args.shots
    det = cfg.detector_config()
    out = _out_dir(args, cfg)
    means = cfg.incident_means()
    if np.any(means < 0):
        raise CliError("schema", "incident means must be >= 0", EXIT_SCHEMA)
    tag_path = out / "tags.bin"
    truth_path = None if args.no_truth else out / "truth.bin"
    manifest = simulate_run(
        cfg.simulation.seed,
        means,
        cfg.schedule.shots_per_state,
        det,
        tag_path,
        truth_path,
        cfg.simulation.chunk_shots,
    )
    reports.write_manifest(out / "manifest.csv", manifest)
    _emit({"tags": str(tag_path), "truth": str(truth_path) if truth_path else None, "states": len(manifest)})
    return EXIT_OK


def _arrival_times(tag_path, det, shots_per_chunk):
    """Relative arrival times of registered clicks, per flat bin."""
    per_bin = [[] for _ in range(N_BINS)]
    for block in iter_assigned(tag_path, det, shots_per_chunk):
        s, b = np.nonzero(block.outcomes != NO_CLICK)
        t = block.outcomes[s, b]
        order = np.argsort(b, kind="stable")
        b, t = b[order], t[order]
        uniq, starts = np.unique(b, return_index=True)
        for u, chunk in zip(uniq, np.split(t, starts[1:])):
            per_bin[u].append(chunk)
    return [np.concatenate(x) if x else np.zeros(0, np.int64) for x in per_bin]


def cmd_fit_lut(args) -> int:
    cfg = _load_run_config(args)
    if args.pool:
        cfg.analysis.fit_pool = args.pool
    if args.free:
        cfg.analysis.fit_family = False
    det = cfg.detector_config()
    out = _out_dir(args, cfg)
    window = det.coincidence_window_ps
    times = _arrival_times(_input(args.tags), det, cfg.analysis.shots_per_chunk)

    def fit(samples):
        # tag times are whole picoseconds, so bins are centred on integers
        hist = ArrivalHistogram.from_samples(samples, -0.5, 1.0, window)
        return fit_mixture(hist, det.n_cap, family=cfg.analysis.fit_family)

    pooled = fit(np.concatenate(times))
    info = {"pool": cfg.analysis.fit_pool, "pooled_chi2_p": pooled.p_value, "pooled_counts": int(sum(t.size for t in times))}
    if cfg.analysis.fit_pool == "all":
        models = (pooled.model,) * N_BINS
    elif cfg.analysis.fit_pool == "bin":
        models, fallback = [], 0
        for t in times:
            try:
                models.append(fit(t).model)
            except (ValueError, FitError):
                models.append(pooled.model)
                fallback += 1
        info["bins_using_pooled_fit"] = fallback
    else:
        raise CliError("schema", f"analysis.fit_pool must be 'all' or 'bin', got {cfg.analysis.fit_pool!r}", EXIT_SCHEMA)
    save_models(out / "models.json", models)
    bank = LutBank.from_models(models, **cfg.lut_grid())
    bank.save(out / "luts.bin")
    info.update(models=str(out / "models.json"), luts=str(out / "luts.bin"), tables=len(bank.tables))
    _emit(info)
    return EXIT_OK


def _bank_for(args, cfg: RunConfig) -> LutBank:
    if args.luts:
        return LutBank.load(_input(args.luts))
    models = load_models(_input(args.models)) if args.models else cfg.timing_models()
    if len(models) == 1:
        models = models * N_BINS
    return LutBank.from_models(models, **cfg.lut_grid())


def cmd_analyze(args) -> int:
    cfg = _load_run_config(args)
    if args.jobs is not None:
        cfg.analysis.jobs = args.jobs
    det = cfg.detector_config()
    out = _out_dir(args, cfg)
    bank = _bank_for(args, cfg)
    table = analyze_tag_file(_input(args.tags), bank, det, cfg.analysis.shots_per_chunk, cfg.analysis.jobs)
    path = out / "shots.csv"
    reports.write_shot_table(path, table)
    _emit(
        {
            "shots": len(table),
            "csv": str(path),
            "out_of_range_lookups": table.out_of_range,
            "out_of_window_tags": int(table.out_of_window_tags.sum()),
        }
    )
    return EXIT_OK


def state_summaries(table, manifest) -> list[ensemble.EnsembleSummary]:
    index = {int(s): i for i, s in enumerate(table.shot_index)}
    out = []
    for e in manifest:
        try:
            lo = index[e.first_shot]
        except KeyError:
            raise CliError("data", f"state {e.state_index}: shot {e.first_shot} missing from shot table", EXIT_DATA)
        sl = slice(lo, lo + e.n_shots)
        if table.shot_index[sl].size != e.n_shots or table.shot_index[sl][-1] != e.first_shot + e.n_shots - 1:
            raise CliError("data", f"state {e.state_index}: shot table does not hold {e.n_shots} consecutive shots", EXIT_DATA)
        out.append(ensemble.summarize(table.measured_mean[sl], e.incident_mean, clicks=table.clicks[sl]))
    return out


def cmd_ensemble_report(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args, cfg)
    table = reports.read_shot_table(_input(args.shots))
    manifest = reports.read_manifest(_input(args.manifest))
    summaries = state_summaries(table, manifest)
    reports.write_ensemble(out / "ensemble.csv", summaries)
    reports.write_sigma_report(out / "sigma_report.csv", ensemble.sigma_report(table.measured_mean, table.measured_std))
    means = np.array([e.incident_mean for e in manifest])
    curve = ensemble.blinded_variance_curve(means, cfg.detector_config(), capped=True)
    reports.write_csv(
        out / "blinding_curve.csv",
        ("incident_mean", "predicted_mean", "predicted_variance"),
        ("photons", "photons", "photons^2"),
        zip(means.tolist(), curve[0].tolist(), curve[1].tolist()),
    )
    info = {
        "states": len(summaries),
        "ensemble": str(out / "ensemble.csv"),
        "sub_sigma_boundary": ensemble.sub_sigma_boundary(table.measured_mean, table.measured_std),
    }
    try:
        info["weighted_g2"], info["weighted_g2_err"] = ensemble.weighted_g2(summaries)
    except ValueError:
        pass
    if args.plots:
        try:
            info["plots"] = [str(p) for p in reports.render_plots(out, summaries, table, curve)]
        except ImportError:
            raise CliError("missing-dependency", "rendering plots needs matplotlib", EXIT_USAGE) from None
    _emit(info)
    return EXIT_OK


def cmd_click_table(args) -> int:
    rows = ensemble.click_table(args.bins)
    if args.out:
        reports.write_click_table(args.out, rows)
    else:
        print("bins,n_max")
        for b, n in rows:
            print(f"{b},{'' if n is None else n}")
    if args.photons is not None:
        for n in args.photons:
            print(f"# detectors for unit sigma at n={n}: {ensemble.detectors_for_unit_sigma(n)}")
    return EXIT_OK


def cmd_tomography(args) -> int:
    cfg = _load_run_config(args)
    t = cfg.tomography
    for name in ("M", "N", "gamma", "max_iter", "rtol"):
        value = getattr(args, name)
        if value is not None:
            setattr(t, name, value)
    out = _out_dir(args, cfg)
    table = reports.read_shot_table(_input(args.shots))
    manifest = reports.read_manifest(_input(args.manifest))
    index = {int(s): i for i, s in enumerate(table.shot_index)}
    groups = []
    for e in manifest:
        lo = index.get(e.first_shot)
        if lo is None:
            raise CliError("data", f"state {e.state_index}: shots missing from shot table", EXIT_DATA)
        groups.append(table.measured_mean[lo : lo + e.n_shots])
    means = np.array([e.incident_mean for e in manifest])
    N = t.N if t.N is not None else int(np.floor(table.measured_mean.max() + 0.5)) + 1
    M = t.M if t.M is not None else int(tomography.stats.poisson.isf(tomography.TRUNCATION_TOL, means.max())) + 2
    F = tomography.build_probe_matrix(means, M)
    P = tomography.build_outcome_matrix(groups, N)
    res = tomography.reconstruct_povm(F, P, t.gamma, max_iter=t.max_iter, rtol=t.rtol)
    tomography.write_povm(out / "povm.bin", res.povm)
    reports.write_diagnostics(out / "diagnostics.csv", res)
    rows = sorted(set(np.linspace(0, M - 1, 9).astype(int).tolist()))
    reports.write_povm_slices(out / "povm_slices.csv", res.povm, rows)
    probed = int(min(M, max(means.max(), 2)))
    _emit(
        {
            "M": M,
            "N": N,
            "converged": res.converged,
            "stop_reason": res.stop_reason,
            "iterations": res.iterations,
            "objective": float(res.objective[-1]) if res.objective.size else None,
            "residual": res.residual,
            "constraint_violation": res.constraint_violation,
            "gamma": res.gamma,
            "ridge_slope": tomography.ridge_slope(res.povm, (0, probed)),
        }
    )
    if not res.converged:
        raise CliError("not-converged", f"tomography stopped at the iteration cap ({res.iterations})", EXIT_NOT_CONVERGED)
    return EXIT_OK


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pnrcount", description="Multiplexed PNR detector simulation and analysis")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML run configuration")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
        p.add_argument("--out-dir", help=f"output directory (default: config paths.output_dir, ${OUTPUT_DIR_ENV}, or .)")

    p = sub.add_parser("simulate", help="simulate a run and write tags, ground truth and manifest")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--incident-mean", type=_float_list, help="comma-separated incident means (overrides schedule)")
    p.add_argument("--states", type=int, help="number of states in the quadratic schedule")
    p.add_argument("--max-mean", type=float, help="largest incident mean of the schedule")
    p.add_argument("--shots", type=int, help="shots per state")
    p.add_argument("--no-truth", action="store_true", help="skip the ground-truth file")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-lut", help="fit timing models to tag histograms and build LUTs")
    common(p)
    p.add_argument("--tags", required=True)
    p.add_argument("--pool", choices=("all", "bin"), help="one fit for all bins or one per bin")
    p.add_argument("--free", action="store_true", help="fit every component freely instead of the tied family")
    p.set_defaults(func=cmd_fit_lut)

    p = sub.add_parser("analyze", help="per-shot measured mean and std")
    common(p)
    p.add_argument("--tags", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--luts", help="LUT bank from fit-lut")
    src.add_argument("--models", help="timing-model JSON (LUTs built on the fly)")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ensemble-report", help="per-state ensemble statistics and plot data")
    common(p)
    p.add_argument("--shots", required=True, help="per-shot CSV from analyze")
    p.add_argument("--manifest", required=True, help="manifest CSV from simulate")
    p.add_argument("--plots", action="store_true", help="also render PNG figures")
    p.set_defaults(func=cmd_ensemble_report)

    p = sub.add_parser("click-table", help="largest photon number a B-bin click detector resolves")
    p.add_argument("--bins", type=_int_list, default=[8, 28, 100, 1024])
    p.add_argument("--photons", type=_int_list, help="also report bins needed for unit std at these n")
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_click_table)

    p = sub.add_parser("tomography", help="reconstruct the POVM matrix from analyzed shots")
    common(p)
    p.add_argument("--shots", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--M", type=int, help="input photon-number truncation")
    p.add_argument("--N", type=int, help="number of outcome bins")
    p.add_argument("--gamma", type=float, help="smoothing weight")
    p.add_argument("--max-iter", type=int)
    p.add_argument("--rtol", type=float)
    p.set_defaults(func=cmd_tomography)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        err = exc
    except SchemaError as exc:
        err = CliError("schema", str(exc), EXIT_SCHEMA)
    except FileNotFoundError as exc:
        err = CliError("missing-input", str(exc), EXIT_USAGE)
    except (TagFormatError, MissingTriggerError, LutCoverageError, FitError, tomography.TruncationError) as exc:
        err = CliError("data", str(exc), EXIT_DATA)
    except ValueError as exc:
        err = CliError("data", str(exc), EXIT_DATA)
    print(json.dumps({"error": err.category, "message": str(err)}), file=sys.stderr)
    return err.code


if __name__ == "__main__":
    sys.exit(main())
