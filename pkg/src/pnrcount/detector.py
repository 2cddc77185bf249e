"""Detector geometry, bin layout and configuration shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from pnrcount.timing import BinTimingModel, family_model

N_SPATIAL = 8
N_TEMPORAL = 128
N_BINS = N_SPATIAL * N_TEMPORAL
N_TEMPORAL_STAGES = 7
N_SPATIAL_STAGES = 3

TRIGGER_CHANNEL = 0
NO_CLICK = -1


class BinId(NamedTuple):
    """One of the 1024 (spatial, temporal) detection bins."""

    spatial: int
    temporal: int

    @property
    def flat(self) -> int:
        return self.spatial * N_TEMPORAL + self.temporal

    @classmethod
    def from_flat(cls, index: int) -> "BinId":
        if not 0 <= index < N_BINS:
            raise ValueError(f"flat bin index {index} outside 0..{N_BINS - 1}")
        return cls(index // N_TEMPORAL, index % N_TEMPORAL)

    @property
    def channel(self) -> int:
        """Time-tagger channel carrying this bin (channel 0 is the trigger)."""
        return self.spatial + 1


@dataclass(frozen=True)
class BlindingParams:
    """Probabilistic per-bin blinding, ``b(n) = 1 - exp(-alpha * n)``.

    ``alpha`` is in 1/photons and ``n`` is the incident mean photon number per pulse.
    """

    alpha: float = 2e-5
    form: str = "exponential"

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"blinding alpha must be finite and >= 0, got {self.alpha}")
        if self.form != "exponential":
            raise ValueError(f"unknown blinding form {self.form!r}")

    def probability(self, incident_mean):
        return -np.expm1(-self.alpha * np.asarray(incident_mean, dtype=float))


NO_BLINDING = BlindingParams(alpha=0.0)


def _default_models() -> tuple[BinTimingModel, ...]:
    model = family_model()
    return (model,) * N_BINS


@dataclass(frozen=True, eq=False)
class DetectorConfig:
    """Multiplexing tree, efficiencies, noise and timing geometry.

    Times are integer picoseconds. ``timing_models`` is indexed by flat bin index
    (``spatial * 128 + temporal``); bins may share one model object.
    """

    temporal_stages: tuple[float, ...] = (0.5,) * N_TEMPORAL_STAGES
    spatial_stages: tuple[float, ...] = (0.5,) * N_SPATIAL_STAGES
    bin_efficiency: np.ndarray = field(default_factory=lambda: np.full(N_BINS, 0.5))
    dark_rate_hz: np.ndarray = field(default_factory=lambda: np.full(N_SPATIAL, 10.0))
    blinding: BlindingParams = field(default_factory=BlindingParams)
    n_cap: int = 15
    temporal_spacing_ps: int = 97_600
    coincidence_window_ps: int = 450
    window_offset_ps: int = 0
    rep_rate_hz: float = 80e3
    timing_models: tuple[BinTimingModel, ...] = field(default_factory=_default_models)

    def __post_init__(self):
        ts = tuple(float(r) for r in self.temporal_stages)
        ss = tuple(float(r) for r in self.spatial_stages)
        if len(ts) != N_TEMPORAL_STAGES or len(ss) != N_SPATIAL_STAGES:
            raise ValueError("need 7 temporal and 3 spatial splitter ratios")
        if not all(0.0 < r < 1.0 for r in ts + ss):
            raise ValueError("splitter ratios must lie in (0, 1)")
        object.__setattr__(self, "temporal_stages", ts)
        object.__setattr__(self, "spatial_stages", ss)

        eff = np.broadcast_to(np.asarray(self.bin_efficiency, dtype=float), (N_BINS,)).copy()
        if np.any(~np.isfinite(eff)) or np.any((eff < 0) | (eff > 1)):
            raise ValueError("bin efficiencies must lie in [0, 1]")
        eff.flags.writeable = False
        object.__setattr__(self, "bin_efficiency", eff)

        dark = np.broadcast_to(np.asarray(self.dark_rate_hz, dtype=float), (N_SPATIAL,)).copy()
        if np.any(~np.isfinite(dark)) or np.any(dark < 0):
            raise ValueError("dark rates must be finite and >= 0")
        dark.flags.writeable = False
        object.__setattr__(self, "dark_rate_hz", dark)

        if self.n_cap < 1:
            raise ValueError("n_cap must be >= 1")
        if self.coincidence_window_ps <= 0:
            raise ValueError("coincidence window must be positive")
        if self.temporal_spacing_ps <= self.coincidence_window_ps:
            raise ValueError("temporal spacing must exceed the coincidence window")
        if self.rep_period_ps <= N_TEMPORAL * self.temporal_spacing_ps + self.window_offset_ps:
            raise ValueError(
                f"repetition period {self.rep_period_ps} ps does not fit "
                f"{N_TEMPORAL} windows spaced {self.temporal_spacing_ps} ps"
            )
        models = tuple(self.timing_models)
        if len(models) == 1:
            models = models * N_BINS
        if len(models) != N_BINS:
            raise ValueError(f"need one timing model per bin ({N_BINS}), got {len(models)}")
        for m in models:
            if m.n_cap < self.n_cap:
                raise ValueError(f"timing model has n_cap {m.n_cap} < detector n_cap {self.n_cap}")
        object.__setattr__(self, "timing_models", models)

    @property
    def rep_period_ps(self) -> int:
        return int(round(1e12 / self.rep_rate_hz))

    def dark_probability(self) -> np.ndarray:
        """Per-bin probability of a dark count inside one coincidence window."""
        per_channel = self.dark_rate_hz * self.coincidence_window_ps * 1e-12
        return np.repeat(np.minimum(per_channel, 1.0), N_TEMPORAL)

    def window_start_ps(self, temporal: int | np.ndarray) -> int | np.ndarray:
        """Window start relative to the trigger."""
        return self.window_offset_ps + np.asarray(temporal) * self.temporal_spacing_ps

    def with_(self, **changes) -> "DetectorConfig":
        return replace(self, **changes)


def ideal_config(**changes) -> DetectorConfig:
    """Default geometry with blinding and dark counts switched off."""
    base = dict(blinding=NO_BLINDING, dark_rate_hz=np.zeros(N_SPATIAL))
    base.update(changes)
    return DetectorConfig(**base)


def unique_models(models: Sequence[BinTimingModel]) -> tuple[list[BinTimingModel], np.ndarray]:
    """Deduplicate models by identity; returns (unique list, per-bin index)."""
    seen: dict[int, int] = {}
    uniq: list[BinTimingModel] = []
    index = np.empty(len(models), dtype=np.intp)
    for i, m in enumerate(models):
        key = id(m)
        if key not in seen:
            seen[key] = len(uniq)
            uniq.append(m)
        index[i] = seen[key]
    return uniq, index
