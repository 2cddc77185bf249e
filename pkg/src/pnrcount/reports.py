"""CSV report files and optional rendered plots.

Every CSV starts with a ``# units:`` comment line aligned with the header row.
Floats are written with 17 significant digits so values round-trip exactly and
re-running on identical inputs yields byte-identical files.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pnrcount.ensemble import EnsembleSummary, SigmaBand
from pnrcount.shots import ShotTable
from pnrcount.sim import StateEntry

SHOT_COLUMNS = ("shot_index", "measured_mean", "measured_std", "clicks", "out_of_window_tags")
SHOT_UNITS = ("count", "photons", "photons", "count", "count")
MANIFEST_COLUMNS = ("state_index", "incident_mean", "first_shot", "n_shots")
MANIFEST_UNITS = ("count", "photons", "count", "count")
ENSEMBLE_UNITS = ("photons", "photons", "photons^2", "1", "1", "dB", "1", "1")
SIGMA_COLUMNS = ("measured_n", "shots", "sigma_median", "sigma_lower_0.15pct", "sigma_upper_99.85pct")
SIGMA_UNITS = ("photons", "count", "photons", "photons", "photons")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return "%.17g" % v


def write_csv(path, columns: Sequence[str], units: Sequence[str], rows: Iterable[Sequence]) -> None:
    if len(columns) != len(units):
        raise ValueError("one unit per column is required")
    with open(path, "w", newline="") as fh:
        fh.write("# units: " + ",".join(units) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path) -> dict[str, np.ndarray]:
    """Read a report CSV into float columns (comment lines skipped)."""
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty CSV") from None
        data = [row for row in reader if row]
    if any(len(r) != len(header) for r in data):
        raise ValueError(f"{path}: ragged rows")
    arr = np.array(data, dtype=float).reshape(len(data), len(header))
    return {name: arr[:, i] for i, name in enumerate(header)}


def _require(cols: dict, names: Sequence[str], path) -> None:
    missing = [n for n in names if n not in cols]
    if missing:
        raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")


def write_shot_table(path, table: ShotTable) -> None:
    rows = zip(
        table.shot_index.tolist(),
        table.measured_mean.tolist(),
        table.measured_std.tolist(),
        table.clicks.tolist(),
        table.out_of_window_tags.tolist(),
    )
    write_csv(path, SHOT_COLUMNS, SHOT_UNITS, rows)


def read_shot_table(path) -> ShotTable:
    c = read_csv(path)
    _require(c, SHOT_COLUMNS, path)
    return ShotTable(
        c["shot_index"].astype(np.int64),
        c["measured_mean"],
        c["measured_std"],
        c["clicks"].astype(np.int64),
        c["out_of_window_tags"].astype(np.int64),
    )


def write_manifest(path, entries: Sequence[StateEntry]) -> None:
    write_csv(
        path,
        MANIFEST_COLUMNS,
        MANIFEST_UNITS,
        ((e.state_index, e.incident_mean, e.first_shot, e.n_shots) for e in entries),
    )


def read_manifest(path) -> list[StateEntry]:
    c = read_csv(path)
    _require(c, MANIFEST_COLUMNS, path)
    return [
        StateEntry(int(d), float(m), int(f), int(n))
        for d, m, f, n in zip(c["state_index"], c["incident_mean"], c["first_shot"], c["n_shots"])
    ]


def write_ensemble(path, summaries: Sequence[EnsembleSummary]) -> None:
    write_csv(path, EnsembleSummary.CSV_COLUMNS, ENSEMBLE_UNITS, (s.row() for s in summaries))


def write_sigma_report(path, bands: Sequence[SigmaBand]) -> None:
    write_csv(path, SIGMA_COLUMNS, SIGMA_UNITS, ((b.measured_n, b.shots, b.median, b.lower, b.upper) for b in bands))


def write_click_table(path, rows: Sequence[tuple[int, int | None]]) -> None:
    write_csv(path, ("bins", "n_max"), ("count", "photons"), ((b, -1 if n is None else n) for b, n in rows))


def write_povm_slices(path, povm: np.ndarray, rows: Sequence[int]) -> None:
    """Selected rows ``Pi[m, :]`` in long format (m, n_prime, probability)."""
    def gen():
        for m in rows:
            for n, p in enumerate(povm[m]):
                yield m, n, p

    write_csv(path, ("m", "n_prime", "probability"), ("photons", "photons", "1"), gen())


def write_diagnostics(path, result) -> None:
    restarts = set(result.restarts)
    write_csv(
        path,
        ("iteration", "objective", "restart"),
        ("count", "1", "flag"),
        ((k + 1, f, int(k + 1 in restarts)) for k, f in enumerate(result.objective)),
    )


# --- rendered plots ------------------------------------------------------------------


def render_plots(out_dir, summaries: Sequence[EnsembleSummary], table: ShotTable, curve=None) -> list[Path]:
    """PNG figures behind the ensemble CSVs; needs matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    made = []
    m = np.array([s.measured_mean for s in summaries])
    v = np.array([s.measured_variance for s in summaries])
    g = np.array([s.g2 for s in summaries])
    ge = np.array([s.g2_err for s in summaries])
    nd = np.array([s.noise_db for s in summaries])

    fig, ax = plt.subplots()
    ax.loglog(m, v, "o", label="simulated ensembles")
    ax.loglog(m, m, "k--", label="Poisson limit")
    if curve is not None:
        order = np.argsort(curve[0])
        ax.loglog(curve[0][order], curve[1][order], "-", label="blinding model")
    ax.set_xlabel("ensemble mean (photons)")
    ax.set_ylabel("ensemble variance (photons$^2$)")
    ax.legend()
    made.append(out_dir / "variance_vs_mean.png")
    fig.savefig(made[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots()
    ax.errorbar(m, g, yerr=ge, fmt="o")
    ax.axhline(1.0, color="k", ls="--")
    ax.set_xlabel("ensemble mean (photons)")
    ax.set_ylabel("g2(0)")
    made.append(out_dir / "g2_vs_mean.png")
    fig.savefig(made[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots()
    ax.semilogx(m, nd, "o")
    ax.axhline(0.0, color="k", ls="--")
    ax.set_xlabel("ensemble mean (photons)")
    ax.set_ylabel("relative detector noise (dB)")
    made.append(out_dir / "noise_vs_mean.png")
    fig.savefig(made[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots()
    sel = table.measured_mean >= 1
    ax.loglog(table.measured_mean[sel], table.measured_std[sel], ",", alpha=0.3)
    x = np.geomspace(1, max(2.0, float(table.measured_mean.max(initial=2.0))), 100)
    ax.loglog(x, np.sqrt(x), "k--", label="Poisson limit")
    ax.axhline(1.0, color="r", ls=":")
    ax.set_xlabel("measured mean per shot (photons)")
    ax.set_ylabel("per-shot standard deviation (photons)")
    ax.legend()
    made.append(out_dir / "shot_sigma.png")
    fig.savefig(made[-1], dpi=120)
    plt.close(fig)
    return made
