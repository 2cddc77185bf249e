"""YAML run configuration.

Every physical quantity carries its unit in the key name. Unknown keys are
rejected so that typos fail loudly instead of silently falling back to defaults.

Example::

    detector:
      bin_efficiency: 0.5
      dark_rate_hz: 10
      blinding_alpha_per_photon: 2.0e-5
      coincidence_window_ps: 450
    schedule:
      n_states: 25
      max_incident_mean: 15393
      shots_per_state: 400
    simulation:
      seed: 7
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from pnrcount.detector import N_SPATIAL_STAGES, N_TEMPORAL_STAGES, BlindingParams, DetectorConfig
from pnrcount.sim import default_schedule
from pnrcount.timing import family_model, load_models

OUTPUT_DIR_ENV = "PNRCOUNT_OUTPUT_DIR"


class SchemaError(ValueError):
    """The configuration document does not match the documented keys or types."""


@dataclass
class DetectorSection:
    temporal_stages: list = field(default_factory=lambda: [0.5] * N_TEMPORAL_STAGES)
    spatial_stages: list = field(default_factory=lambda: [0.5] * N_SPATIAL_STAGES)
    bin_efficiency: Any = 0.5  # scalar or 1024 values
    dark_rate_hz: Any = 10.0  # scalar or 8 values
    blinding_alpha_per_photon: float = 2e-5
    n_cap: int = 15
    temporal_spacing_ps: int = 97_600
    coincidence_window_ps: int = 450
    window_offset_ps: int = 0
    rep_rate_hz: float = 80e3


@dataclass
class TimingSection:
    t0_ps: float = 330.0
    slope_ps: float = 110.0
    sigma0_ps: float = 8.0
    tau0_ps: float = 12.0
    models_path: str | None = None


@dataclass
class ScheduleSection:
    incident_means: list | None = None
    n_states: int = 125
    max_incident_mean: float = 15393.0
    shots_per_state: int = 1000


@dataclass
class SimulationSection:
    seed: int = 0
    chunk_shots: int = 1000


@dataclass
class AnalysisSection:
    lut_grid_origin_ps: float = 0.0
    lut_grid_step_ps: float = 1.0
    lut_grid_len: int | None = None  # default: one row per ps of the coincidence window
    shots_per_chunk: int = 2000
    jobs: int = 1
    fit_pool: str = "all"
    fit_family: bool = True


@dataclass
class TomographySection:
    M: int | None = None
    N: int | None = None
    gamma: float | None = None
    max_iter: int = 50_000
    rtol: float = 1e-9


@dataclass
class PathsSection:
    output_dir: str | None = None


@dataclass
class RunConfig:
    detector: DetectorSection = field(default_factory=DetectorSection)
    timing: TimingSection = field(default_factory=TimingSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    tomography: TomographySection = field(default_factory=TomographySection)
    paths: PathsSection = field(default_factory=PathsSection)

    def output_dir(self) -> Path:
        return Path(self.paths.output_dir or os.environ.get(OUTPUT_DIR_ENV) or ".")

    def incident_means(self) -> np.ndarray:
        s = self.schedule
        if s.incident_means is not None:
            return np.asarray(s.incident_means, dtype=float)
        return default_schedule(s.n_states, s.max_incident_mean)

    def timing_models(self):
        t = self.timing
        if t.models_path:
            return tuple(load_models(t.models_path))
        model = family_model(self.detector.n_cap, t0=t.t0_ps, slope=t.slope_ps, sigma0=t.sigma0_ps, tau0=t.tau0_ps)
        return (model,)

    def detector_config(self, models=None) -> DetectorConfig:
        d = self.detector
        try:
            return DetectorConfig(
                temporal_stages=tuple(d.temporal_stages),
                spatial_stages=tuple(d.spatial_stages),
                bin_efficiency=np.asarray(d.bin_efficiency, dtype=float),
                dark_rate_hz=np.asarray(d.dark_rate_hz, dtype=float),
                blinding=BlindingParams(alpha=float(d.blinding_alpha_per_photon)),
                n_cap=int(d.n_cap),
                temporal_spacing_ps=int(d.temporal_spacing_ps),
                coincidence_window_ps=int(d.coincidence_window_ps),
                window_offset_ps=int(d.window_offset_ps),
                rep_rate_hz=float(d.rep_rate_hz),
                timing_models=self.timing_models() if models is None else tuple(models),
            )
        except (ValueError, TypeError) as exc:
            raise SchemaError(f"detector: {exc}") from exc

    def lut_grid(self) -> dict:
        a = self.analysis
        n = a.lut_grid_len
        if n is None:
            n = int(np.ceil(self.detector.coincidence_window_ps / a.lut_grid_step_ps))
        return dict(grid_origin=a.lut_grid_origin_ps, grid_step=a.lut_grid_step_ps, grid_len=n)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_type(section: str, name: str, value, default):
    if value is None or default is None or isinstance(default, (list,)) or name in ("bin_efficiency", "dark_rate_hz"):
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise SchemaError(f"{section}.{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"{section}.{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{section}.{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise SchemaError(f"{section}.{name}: expected a string, got {value!r}")
    return value


def _build_section(cls, section: str, data) -> Any:
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise SchemaError(f"section {section!r} must be a mapping")
    obj = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise SchemaError(f"unknown key(s) in {section}: {', '.join(map(str, unknown))}")
    for name, value in data.items():
        setattr(obj, name, _check_type(section, name, value, getattr(obj, name)))
    return obj


def config_from_dict(data: dict | None) -> RunConfig:
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise SchemaError("configuration root must be a mapping")
    sections = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise SchemaError(f"unknown section(s): {', '.join(map(str, unknown))}")
    kwargs = {}
    for name, f in sections.items():
        kwargs[name] = _build_section(f.default_factory, name, data.get(name))
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise SchemaError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
