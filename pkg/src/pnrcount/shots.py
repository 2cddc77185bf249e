"""Per-shot pipeline: time tags -> 1024 bin outcomes -> photon-number distributions."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from pnrcount.detector import N_BINS, N_SPATIAL, N_TEMPORAL, NO_CLICK, TRIGGER_CHANNEL, BinId, DetectorConfig
from pnrcount.lut import Lut, LutBank, PhotonNumberDistribution, lookup
from pnrcount.tagio import TagFileHeader, open_tags, validate_records

DEFAULT_MAX_SUPPORT = N_BINS * 15
NEGATIVE_FLOOR = 1e-12
RENORM_TOLERANCE = 1e-6


class TimeTag(NamedTuple):
    channel: int
    timestamp: int


class MissingTriggerError(ValueError):
    def __init__(self, index: int, start: int, stop: int, period: int):
        super().__init__(
            f"trigger gap after trigger {index}: {start} ps -> {stop} ps "
            f"({(stop - start) / period:.2f} periods, limit 1.5)"
        )
        self.index, self.start, self.stop = index, start, stop


@dataclass(eq=False)
class ShotRecord:
    """Outcomes for all 1024 bins of one shot.

    ``outcomes[i]`` is the arrival time (ps, relative to the window start) of flat
    bin ``i``, or ``NO_CLICK``.
    """

    shot_index: int
    outcomes: np.ndarray
    extra_tags: int = 0
    out_of_window_tags: int = 0

    def outcome(self, b: BinId) -> int | None:
        v = int(self.outcomes[b.flat])
        return None if v == NO_CLICK else v

    @property
    def clicks(self) -> int:
        return int(np.count_nonzero(self.outcomes != NO_CLICK))


@dataclass(eq=False)
class AssignedShots:
    """Vectorized bin assignment for a block of consecutive shots."""

    shot_index: np.ndarray  # (S,)
    outcomes: np.ndarray  # (S, 1024) int64, NO_CLICK where empty
    extra_tags: np.ndarray  # (S,) tags beyond the first inside a window
    out_of_window: np.ndarray  # (S,) click tags outside every window
    orphan_tags: int = 0  # click tags before the first trigger

    def records(self) -> list[ShotRecord]:
        return [
            ShotRecord(int(i), o, int(e), int(w))
            for i, o, e, w in zip(self.shot_index, self.outcomes, self.extra_tags, self.out_of_window)
        ]


def _as_arrays(tags) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(tags, np.ndarray) and tags.dtype.names:
        return tags["timestamp"].astype(np.int64), tags["channel"].astype(np.int64)
    tags = list(tags)
    if not tags:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    ch, ts = zip(*((t.channel, t.timestamp) for t in tags))
    return np.asarray(ts, dtype=np.int64), np.asarray(ch, dtype=np.int64)


def assign_arrays(
    timestamps: np.ndarray,
    channels: np.ndarray,
    geometry: DetectorConfig,
    first_shot_index: int = 0,
    check_sorted: bool = True,
) -> AssignedShots:
    """Assign tags to (shot, bin); each trigger opens a shot, first tag in a window wins."""
    ts = np.asarray(timestamps, dtype=np.int64)
    ch = np.asarray(channels, dtype=np.int64)
    if np.any(ts < 0):
        raise ValueError("timestamps must be nonnegative")
    if np.any((ch < 0) | (ch > N_SPATIAL)):
        raise ValueError(f"channels must lie in 0..{N_SPATIAL}")
    if check_sorted:
        for c in range(N_SPATIAL + 1):
            sel = ts[ch == c]
            bad = np.flatnonzero(sel[1:] < sel[:-1])
            if bad.size:
                raise ValueError(f"tags on channel {c} are not time-sorted (inversion at its tag {bad[0] + 1})")
    trig = ts[ch == TRIGGER_CHANNEL]
    period = geometry.rep_period_ps
    gaps = np.flatnonzero(np.diff(trig) > 1.5 * period)
    if gaps.size:
        g = int(gaps[0])
        raise MissingTriggerError(g, int(trig[g]), int(trig[g + 1]), period)
    n_shots = trig.size
    outcomes = np.full((n_shots, N_BINS), NO_CLICK, dtype=np.int64)
    extra = np.zeros(n_shots, dtype=np.int64)
    oow = np.zeros(n_shots, dtype=np.int64)

    click = ch != TRIGGER_CHANNEL
    cts, cch = ts[click], ch[click]
    shot = np.searchsorted(trig, cts, side="right") - 1
    orphan = int(np.count_nonzero(shot < 0))
    keep = shot >= 0
    cts, cch, shot = cts[keep], cch[keep], shot[keep]
    dt = cts - trig[shot] - geometry.window_offset_ps
    k = np.floor_divide(dt, geometry.temporal_spacing_ps)
    rel = dt - k * geometry.temporal_spacing_ps
    inside = (dt >= 0) & (k < N_TEMPORAL) & (rel < geometry.coincidence_window_ps)
    if n_shots:
        oow += np.bincount(shot[~inside], minlength=n_shots)
    key = shot[inside] * N_BINS + (cch[inside] - 1) * N_TEMPORAL + k[inside]
    uniq, first = np.unique(key, return_index=True)
    outcomes.reshape(-1)[uniq] = rel[inside][first]
    if n_shots:
        extra += np.bincount(shot[inside], minlength=n_shots) - np.bincount(uniq // N_BINS, minlength=n_shots)
    return AssignedShots(np.arange(n_shots) + first_shot_index, outcomes, extra, oow, orphan)


def assign_bins(tags, geometry: DetectorConfig) -> list[ShotRecord]:
    """Split a tag stream into shots; accepts TimeTag items or a structured record array."""
    ts, ch = _as_arrays(tags)
    return assign_arrays(ts, ch, geometry).records()


def _lut_for(luts, i: int) -> Lut:
    try:
        if isinstance(luts, Mapping):
            b = BinId.from_flat(i)
            if b in luts:
                return luts[b]
            return luts[i]
        return luts[i]
    except (KeyError, IndexError):
        raise KeyError(f"no LUT for bin {BinId.from_flat(i)}") from None


def per_bin_pnds(shot: ShotRecord, luts) -> list[PhotonNumberDistribution]:
    """Look up every bin's posterior; ``luts`` is a LutBank, sequence, or mapping by BinId/flat index."""
    if isinstance(luts, LutBank):
        return _bank_pnds(np.asarray(shot.outcomes), luts)
    out = []
    for i, v in enumerate(shot.outcomes):
        lut = _lut_for(luts, i)
        out.append(lookup(lut, None if v == NO_CLICK else float(v)))
    return out


def _bank_pnds(outcomes: np.ndarray, bank: LutBank) -> list[PhotonNumberDistribution]:
    # same result as per-bin lookup, with row indices computed per table in one pass
    if len(bank) < outcomes.size:
        raise KeyError(f"no LUT for bin {BinId.from_flat(len(bank))}")
    out = [PhotonNumberDistribution.vacuum()] * outcomes.size
    clicked = np.flatnonzero(outcomes != NO_CLICK)
    tables = bank.index[clicked]
    for u in np.unique(tables):
        lut = bank.tables[u]
        bins = clicked[tables == u]
        rows, outside = lut.row_index(outcomes[bins].astype(float))
        lut.out_of_range += outside
        for i, k in zip(bins, rows):
            out[i] = PhotonNumberDistribution(lut.rows[k], check=False)
    return out


def _next_pow2(n: int) -> int:
    return 1 << max(int(n - 1).bit_length(), 0)


# multiple of eps times the peak below which transform output is treated as round-off
FFT_NOISE_EPS = 128
# combined support up to which "auto" convolves directly
DIRECT_MAX_SUPPORT = 1024


def _group_inputs(pnds: Sequence) -> tuple[list, int]:
    """Distinct non-vacuum inputs with multiplicities, and their combined support."""
    groups: dict[bytes, list] = {}
    total = 0
    for p in pnds:
        if isinstance(p, PhotonNumberDistribution):
            # already validated on construction
            a = p.probs
            if a.size == 1:
                continue
        else:
            a = np.asarray(p, dtype=float)
            if a.ndim != 1 or a.size < 1:
                raise ValueError("each distribution must be a nonempty 1-D sequence")
            if abs(a.sum() - 1.0) > 1e-9 or np.any(a < 0):
                raise ValueError("inputs must be normalized nonnegative distributions")
        nz = np.flatnonzero(a)
        a = a[: nz[-1] + 1]
        if a.size == 1:
            continue
        total += a.size - 1
        key = a.tobytes()
        if key in groups:
            groups[key][1] += 1
        else:
            groups[key] = [a, 1]
    return list(groups.values()), total


def _convolve_direct(items: list, total: int) -> np.ndarray:
    # sums of nonnegative products, so every entry keeps full relative precision
    out = np.ones(1)
    for a, count in items:
        for _ in range(count):
            out = np.convolve(out, a)
    return out


def _convolve_fft(items: list, total: int, clean: bool) -> np.ndarray:
    size = _next_pow2(total + 1)
    spec = np.ones(size // 2 + 1, dtype=complex)
    for start in range(0, len(items), 64):
        block = items[start : start + 64]
        mat = np.zeros((len(block), size))
        for j, (a, _) in enumerate(block):
            mat[j, : a.size] = a
        ffts = np.fft.rfft(mat, axis=1)
        for j, (_, count) in enumerate(block):
            spec *= ffts[j] if count == 1 else ffts[j] ** count
    out = np.fft.irfft(spec, size)[: total + 1]
    if out.min() < -NEGATIVE_FLOOR:
        raise FloatingPointError(f"inverse transform produced {out.min():.3g} < -{NEGATIVE_FLOOR}")
    out[out < 0] = 0.0
    if clean:
        # round-off leaves a floor of a few eps times the peak across the whole transform;
        # far from the mean it is weighted by (n - mean)^2 and swamps narrow variances
        out[out <= FFT_NOISE_EPS * np.finfo(float).eps * out.max()] = 0.0
    return out


def convolve_all(
    pnds: Sequence,
    max_support: int = DEFAULT_MAX_SUPPORT,
    trim_below: float = 1e-15,
    method: str = "auto",
) -> PhotonNumberDistribution:
    """Distribution of the sum of independent photon numbers.

    ``method="fft"`` multiplies the spectra of all inputs in one pass; identical
    inputs are raised to a power in Fourier space instead of being transformed
    repeatedly. ``"direct"`` convolves in the sample domain, which keeps full
    relative precision in tiny entries. ``"auto"`` convolves directly up to a
    combined support of ``DIRECT_MAX_SUPPORT`` and uses the FFT beyond. Vacuum
    inputs are the identity and are skipped. Trailing entries ``<= trim_below``
    are dropped unless they matter to the variance; pass 0 to keep the full
    support and the raw transform.
    """
    if method not in ("auto", "fft", "direct"):
        raise ValueError(f"unknown method {method!r}")
    items, total = _group_inputs(pnds)
    if total > max_support:
        raise ValueError(f"combined support {total} exceeds maximum {max_support}")
    if not items:
        return PhotonNumberDistribution.vacuum()
    if method == "direct" or (method == "auto" and total <= DIRECT_MAX_SUPPORT):
        out = _convolve_direct(items, total)
    else:
        out = _convolve_fft(items, total, clean=trim_below > 0)
    s = out.sum()
    if abs(s - 1.0) > RENORM_TOLERANCE:
        raise FloatingPointError(f"renormalization correction {abs(s - 1.0):.3g} exceeds {RENORM_TOLERANCE}")
    out /= s
    if trim_below > 0:
        out = out[: _trimmed_length(out, trim_below)]
    return PhotonNumberDistribution(out, check=False)


# largest share of the variance a trimmed tail may carry
TRIM_VARIANCE_SHARE = 1e-12


def _trimmed_length(p: np.ndarray, trim_below: float) -> int:
    """Length after dropping the trailing run of entries ``<= trim_below``.

    The run is shortened so the dropped mass never carries more than
    ``TRIM_VARIANCE_SHARE`` of the variance; for nearly deterministic sums even
    1e-15 entries a few photons out dominate the spread.
    """
    n = np.arange(p.size)
    mean = n @ p
    contrib = (n - mean) ** 2 * p
    var = contrib.sum()
    small = p <= trim_below
    # suffix sums of the tail contribution, and whether the whole suffix is small
    tail = np.cumsum(contrib[::-1])[::-1]
    all_small = np.logical_and.accumulate(small[::-1])[::-1]
    ok = all_small & (tail <= TRIM_VARIANCE_SHARE * var)
    ok[0] = False
    cut = np.flatnonzero(ok)
    return int(cut[0]) if cut.size else p.size


def shot_moments(pnds: Sequence) -> tuple[float, float]:
    """Mean and standard deviation of the summed photon number from per-bin moments."""
    mean = 0.0
    var = 0.0
    for p in pnds:
        a = np.asarray(p, dtype=float)
        n = np.arange(a.size)
        m = n @ a
        mean += m
        var += max(float(((n - m) ** 2) @ a), 0.0)
    return float(mean), float(np.sqrt(var))


@dataclass(eq=False)
class ShotTable:
    """Per-shot results; the CSV columns of ``analyze``."""

    shot_index: np.ndarray
    measured_mean: np.ndarray
    measured_std: np.ndarray
    clicks: np.ndarray
    out_of_window_tags: np.ndarray
    out_of_range: int = 0

    def __len__(self):
        return self.shot_index.size

    @classmethod
    def concat(cls, parts: Sequence["ShotTable"]) -> "ShotTable":
        if not parts:
            z = np.zeros(0)
            return cls(z.astype(np.int64), z, z, z.astype(np.int64), z.astype(np.int64))
        return cls(
            np.concatenate([p.shot_index for p in parts]),
            np.concatenate([p.measured_mean for p in parts]),
            np.concatenate([p.measured_std for p in parts]),
            np.concatenate([p.clicks for p in parts]),
            np.concatenate([p.out_of_window_tags for p in parts]),
            sum(p.out_of_range for p in parts),
        )


def measure_outcomes(outcomes: np.ndarray, bank: LutBank) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Vectorized ``shot_moments(per_bin_pnds(...))`` for an ``(S, 1024)`` outcome block.

    Returns ``(mean, std, clicks, out_of_range)``.
    """
    outcomes = np.asarray(outcomes)
    if len(bank) != outcomes.shape[1]:
        raise KeyError(f"LUT bank covers {len(bank)} bins, outcomes have {outcomes.shape[1]}")
    mean_contrib = np.zeros(outcomes.shape)
    var_contrib = np.zeros(outcomes.shape)
    clicked = outcomes != NO_CLICK
    oor = 0
    for u, lut in enumerate(bank.tables):
        cols = np.flatnonzero(bank.index == u)
        if cols.size == 0:
            continue
        sub = outcomes[:, cols]
        hit = clicked[:, cols]
        rows, outside = lut.row_index(sub[hit])
        oor += outside
        m = np.zeros(sub.shape)
        v = np.zeros(sub.shape)
        m[hit] = lut.row_mean[rows]
        v[hit] = lut.row_var[rows]
        mean_contrib[:, cols] = m
        var_contrib[:, cols] = v
    return mean_contrib.sum(axis=1), np.sqrt(var_contrib.sum(axis=1)), clicked.sum(axis=1), oor


def measure_assigned(assigned: AssignedShots, bank: LutBank) -> ShotTable:
    mean, std, clicks, oor = measure_outcomes(assigned.outcomes, bank)
    return ShotTable(assigned.shot_index, mean, std, clicks.astype(np.int64), assigned.out_of_window, oor)


def iter_assigned(path, geometry: DetectorConfig, shots_per_chunk: int = 2000) -> Iterator[AssignedShots]:
    """Stream a tag file as blocks of whole shots (split at trigger records)."""
    header, rec = open_tags(path)
    check_header(header, geometry)
    if rec.size == 0:
        return
    trig_pos = np.flatnonzero(np.asarray(rec["channel"]) == TRIGGER_CHANNEL)
    trig_ts = np.asarray(rec["timestamp"][trig_pos]).astype(np.int64)
    gaps = np.flatnonzero(np.diff(trig_ts) > 1.5 * geometry.rep_period_ps)
    if gaps.size:
        g = int(gaps[0])
        raise MissingTriggerError(g, int(trig_ts[g]), int(trig_ts[g + 1]), geometry.rep_period_ps)
    bounds = list(trig_pos[::shots_per_chunk]) + [rec.size]
    if bounds[0] != 0:
        bounds[0] = 0
    last_ts = None
    shot0 = 0
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        chunk = np.asarray(rec[lo:hi])
        validate_records(chunk, header.channel_count, 16 * lo + 28, last_ts)
        last_ts = int(chunk["timestamp"][-1]) if chunk.size else last_ts
        block = assign_arrays(chunk["timestamp"].astype(np.int64), chunk["channel"].astype(np.int64), geometry, shot0, check_sorted=False)
        shot0 += block.shot_index.size
        yield block


def check_header(header: TagFileHeader, geometry: DetectorConfig) -> None:
    if header.rep_period_ps != geometry.rep_period_ps:
        raise ValueError(
            f"tag file repetition period {header.rep_period_ps} ps differs from configured {geometry.rep_period_ps} ps"
        )


def analyze_tag_file(path, bank: LutBank, geometry: DetectorConfig, shots_per_chunk: int = 2000, jobs: int = 1) -> ShotTable:
    """Per-shot mean/std for every shot in a tag file; output order is shot order for any ``jobs``."""
    blocks = iter_assigned(path, geometry, shots_per_chunk)
    if jobs <= 1:
        parts = [measure_assigned(b, bank) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda b: measure_assigned(b, bank), blocks))
    return ShotTable.concat(parts)
