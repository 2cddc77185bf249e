"""Ground-truth simulator for the multiplexed detector.

Per-bin photon numbers are drawn as exact Poisson variates (a coherent state
stays Poissonian through any splitting and loss network), so the cost per shot
is O(bins) regardless of the incident mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pnrcount.detector import (
    N_BINS,
    N_SPATIAL,
    N_SPATIAL_STAGES,
    N_TEMPORAL,
    N_TEMPORAL_STAGES,
    NO_CLICK,
    DetectorConfig,
    unique_models,
)
from pnrcount.shots import TimeTag
from pnrcount.tagio import FLAG_BLINDED, FLAG_DARK, FLAG_LOST, TagWriter, TruthWriter, make_records, truth_dtype

NONE_TIME = np.iinfo(np.int64).min

DEFAULT_MAX_MEAN = 15393
DEFAULT_STATES = 125


def default_schedule(n_states: int = DEFAULT_STATES, max_mean: float = DEFAULT_MAX_MEAN) -> np.ndarray:
    """Quadratically spaced incident means ``round(max_mean * (d / (n_states - 1))**2)``."""
    if n_states < 2:
        return np.array([float(round(max_mean))])
    d = np.arange(n_states)
    return np.round(max_mean * (d / (n_states - 1)) ** 2)


def _stage_fractions(ratios: Sequence[float], n_stages: int) -> np.ndarray:
    # bit x of the index set -> the (1 - r_x) arm of stage x
    idx = np.arange(1 << n_stages)
    frac = np.ones(idx.size)
    for x, r in enumerate(ratios):
        bit = (idx >> x) & 1
        frac *= np.where(bit == 1, 1.0 - r, r)
    return frac


def path_fractions(config: DetectorConfig) -> np.ndarray:
    """Fraction of the incident intensity routed to each flat bin (sums to 1)."""
    spatial = _stage_fractions(config.spatial_stages, N_SPATIAL_STAGES)
    temporal = _stage_fractions(config.temporal_stages, N_TEMPORAL_STAGES)
    return np.outer(spatial, temporal).ravel()


def split_tree(incident_mean: float, config: DetectorConfig) -> np.ndarray:
    """Mean detected photons per bin: incident mean x path product x bin efficiency."""
    if incident_mean < 0:
        raise ValueError("incident mean must be >= 0")
    return incident_mean * path_fractions(config) * config.bin_efficiency


def overall_efficiency(config: DetectorConfig) -> float:
    return float(path_fractions(config) @ config.bin_efficiency)


@dataclass(eq=False)
class GroundTruth:
    """Per-shot, per-bin truth arrays, each shaped ``(S, 1024)``.

    ``absorbed`` counts photons absorbed in the bin (post-loss); ``detected`` is the
    registered photon number after the PNR cap, blinding and window loss.
    ``rel_time`` is the registered arrival time in ps or ``NO_CLICK``.
    """

    shot_index: np.ndarray
    incident_mean: float
    absorbed: np.ndarray
    detected: np.ndarray
    blinded: np.ndarray
    dark: np.ndarray
    lost: np.ndarray
    rel_time: np.ndarray

    def flags(self) -> np.ndarray:
        return (
            self.blinded.astype(np.uint8) * FLAG_BLINDED
            + self.dark.astype(np.uint8) * FLAG_DARK
            + self.lost.astype(np.uint8) * FLAG_LOST
        )


@dataclass(eq=False)
class SimBatch:
    truth: GroundTruth
    click_time: np.ndarray  # earliest click per bin incl. out-of-window ones; NONE_TIME if none

    @property
    def outcomes(self) -> np.ndarray:
        return self.truth.rel_time


def _param_tables(config: DetectorConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    uniq, index = unique_models(config.timing_models)
    k = config.n_cap
    mu = np.stack([m.mu[:k] for m in uniq])[index]
    sigma = np.stack([m.sigma[:k] for m in uniq])[index]
    tau = np.stack([m.tau[:k] for m in uniq])[index]
    return mu, sigma, tau


def simulate_batch(
    rng: np.random.Generator,
    incident_mean: float,
    config: DetectorConfig,
    n_shots: int,
    first_shot_index: int = 0,
    per_bin_means: np.ndarray | None = None,
) -> SimBatch:
    """Simulate ``n_shots`` independent shots of a coherent pulse."""
    lam = split_tree(incident_mean, config) if per_bin_means is None else np.asarray(per_bin_means, dtype=float)
    if lam.shape != (N_BINS,):
        raise ValueError(f"need {N_BINS} per-bin means")
    shape = (n_shots, N_BINS)
    window = config.coincidence_window_ps

    absorbed = rng.poisson(lam, size=shape)
    b = float(config.blinding.probability(incident_mean))
    blinded = rng.random(shape) < b if b > 0 else np.zeros(shape, dtype=bool)
    detected = np.minimum(absorbed, config.n_cap)
    detected[blinded] = 0

    click_time = np.full(shape, NONE_TIME, dtype=np.int64)
    s_idx, b_idx = np.nonzero(detected)
    if s_idx.size:
        mu, sigma, tau = _param_tables(config)
        n = detected[s_idx, b_idx] - 1
        t = rng.normal(mu[b_idx, n], sigma[b_idx, n]) + rng.exponential(tau[b_idx, n])
        click_time[s_idx, b_idx] = np.rint(t).astype(np.int64)

    p_dark = config.dark_probability()
    if np.any(p_dark > 0):
        dark = (rng.random(shape) < p_dark) & ~blinded
        d_s, d_b = np.nonzero(dark)
        t_dark = rng.integers(0, window, size=d_s.size)
        current = click_time[d_s, d_b]
        earlier = (current == NONE_TIME) | (t_dark < current)
        click_time[d_s[earlier], d_b[earlier]] = t_dark[earlier]
    else:
        dark = np.zeros(shape, dtype=bool)

    has_click = click_time != NONE_TIME
    in_window = has_click & (click_time >= 0) & (click_time < window)
    lost = has_click & ~in_window
    detected[lost] = 0
    rel_time = np.where(in_window, click_time, NO_CLICK)

    truth = GroundTruth(
        shot_index=np.arange(n_shots, dtype=np.int64) + first_shot_index,
        incident_mean=float(incident_mean),
        absorbed=absorbed,
        detected=detected,
        blinded=blinded,
        dark=dark,
        lost=lost,
        rel_time=rel_time,
    )
    return SimBatch(truth, click_time)


def batch_records(batch: SimBatch, config: DetectorConfig) -> np.ndarray:
    """Tag records (triggers on channel 0, clicks on 1..8) for a simulated batch."""
    period = config.rep_period_ps
    shots = batch.truth.shot_index
    trig = shots * period
    s_idx, b_idx = np.nonzero(batch.click_time != NONE_TIME)
    spatial, temporal = np.divmod(b_idx, N_TEMPORAL)
    ts = trig[s_idx] + config.window_start_ps(temporal) + batch.click_time[s_idx, b_idx]
    ok = ts >= 0
    all_ts = np.concatenate([trig, ts[ok]])
    all_ch = np.concatenate([np.zeros(trig.size, dtype=np.int64), spatial[ok] + 1])
    order = np.lexsort((all_ch, all_ts))
    return make_records(all_ts[order].astype(np.uint64), all_ch[order].astype(np.uint8))


def simulate_shot(
    rng: np.random.Generator,
    per_bin_means: np.ndarray,
    config: DetectorConfig,
    *,
    incident_mean: float | None = None,
    shot_index: int = 0,
) -> tuple[list[TimeTag], GroundTruth]:
    """One shot as a tag list plus its ground truth.

    ``incident_mean`` sets the blinding probability; by default it is inferred from
    ``per_bin_means`` and the configured overall efficiency.
    """
    per_bin_means = np.asarray(per_bin_means, dtype=float)
    if incident_mean is None:
        eff = overall_efficiency(config)
        incident_mean = float(per_bin_means.sum() / eff) if eff > 0 else 0.0
    batch = simulate_batch(rng, incident_mean, config, 1, shot_index, per_bin_means)
    rec = batch_records(batch, config)
    tags = [TimeTag(int(c), int(t)) for t, c in zip(rec["timestamp"], rec["channel"])]
    return tags, batch.truth


@dataclass(frozen=True)
class StateEntry:
    state_index: int
    incident_mean: float
    first_shot: int
    n_shots: int


def state_rng(seed: int, state: int, chunk: int) -> np.random.Generator:
    """Independent stream per (state, chunk); results do not depend on worker count."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(state, chunk)))


def iter_state_batches(seed: int, incident_means: Sequence[float], shots_per_state: int, config: DetectorConfig, chunk_shots: int = 1000):
    """Yield ``(state_index, SimBatch)`` in shot order."""
    if shots_per_state < 1:
        raise ValueError("shots_per_state must be >= 1")
    shot0 = 0
    for d, mean in enumerate(incident_means):
        for c, start in enumerate(range(0, shots_per_state, chunk_shots)):
            n = min(chunk_shots, shots_per_state - start)
            yield d, simulate_batch(state_rng(seed, d, c), float(mean), config, n, shot0 + start)
        shot0 += shots_per_state


def simulate_run(
    seed: int,
    incident_means: Sequence[float],
    shots_per_state: int,
    config: DetectorConfig,
    tag_path,
    truth_path=None,
    chunk_shots: int = 1000,
) -> list[StateEntry]:
    """Simulate every state and stream tags (and optional ground truth) to disk.

    Output is byte-identical for a given seed. Files are written under a
    ``.partial`` name and only renamed on success.
    """
    manifest = [
        StateEntry(d, float(m), d * shots_per_state, shots_per_state) for d, m in enumerate(incident_means)
    ]
    truth_writer = TruthWriter(truth_path, N_BINS) if truth_path is not None else None
    try:
        with TagWriter(tag_path, config.rep_period_ps, N_SPATIAL + 1) as tags:
            for d, batch in iter_state_batches(seed, incident_means, shots_per_state, config, chunk_shots):
                tags.append(batch_records(batch, config))
                if truth_writer is not None:
                    truth_writer.append(truth_records(batch.truth, d))
    except BaseException:
        if truth_writer is not None:
            truth_writer.abort()
        raise
    if truth_writer is not None:
        truth_writer.close()
    return manifest


def truth_records(truth: GroundTruth, state_index: int) -> np.ndarray:
    rec = np.zeros(truth.shot_index.size, dtype=truth_dtype(N_BINS))
    rec["shot_index"] = truth.shot_index
    rec["state_index"] = state_index
    rec["incident_mean"] = truth.incident_mean
    rec["absorbed"] = np.minimum(truth.absorbed, np.iinfo(np.uint16).max)
    rec["detected"] = truth.detected
    rec["rel_time_ps"] = truth.rel_time
    rec["flags"] = truth.flags()
    return rec


def bin_path(flat: int) -> list[tuple[str, int, int]]:
    """Explicit (stage kind, stage number, arm) path of a bin; arm 1 is the ``1 - r`` output."""
    spatial, temporal = divmod(flat, N_TEMPORAL)
    path = [("spatial", j, (spatial >> j) & 1) for j in range(N_SPATIAL_STAGES)]
    path += [("temporal", x, (temporal >> x) & 1) for x in range(N_TEMPORAL_STAGES)]
    return path


__all__ = [
    "GroundTruth",
    "SimBatch",
    "StateEntry",
    "batch_records",
    "bin_path",
    "default_schedule",
    "iter_state_batches",
    "overall_efficiency",
    "path_fractions",
    "simulate_batch",
    "simulate_run",
    "simulate_shot",
    "split_tree",
    "state_rng",
    "truth_records",
]
