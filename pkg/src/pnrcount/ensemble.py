"""Ensemble statistics over shots, click-detector baselines and the blinding model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from pnrcount.detector import DetectorConfig
from pnrcount.lut import PhotonNumberDistribution


def g2_zero(mean: float, variance: float) -> float:
    """Zero-delay second-order correlation ``1 + (variance - mean) / mean**2``."""
    if not mean > 0:
        raise ValueError(f"g2 needs a positive mean, got {mean}")
    return 1.0 + (variance - mean) / mean**2


def relative_noise_db(mean: float, std: float) -> float:
    """``10 log10(std / sqrt(mean))``; 0 dB is the Poisson limit, ``-inf`` for zero noise."""
    if not mean > 0:
        raise ValueError(f"relative noise needs a positive mean, got {mean}")
    if std < 0:
        raise ValueError("std must be >= 0")
    if std == 0:
        return -math.inf
    return 10.0 * math.log10(std / math.sqrt(mean))


def efficiency_pnr(measured_mean: float, incident_mean: float) -> float:
    if not incident_mean > 0:
        raise ValueError("incident mean must be positive")
    return measured_mean / incident_mean


def efficiency_click(p_no_click: float, incident_mean: float) -> float:
    """Efficiency from the vacuum probability ``exp(-eta * n)`` of a click detector."""
    if not incident_mean > 0:
        raise ValueError("incident mean must be positive")
    if not 0 < p_no_click <= 1:
        raise ValueError(f"no-click probability must lie in (0, 1], got {p_no_click}")
    return -math.log(p_no_click) / incident_mean


# --- click-detector baseline ---------------------------------------------------------


def fock_click_stats(B: int, n) -> tuple:
    """Mean and variance of the number of occupied bins for ``n`` photons in ``B`` equal bins.

    Uses ``var = B a (1 - a) + B (B - 1) (c - a**2)`` with ``a = (1 - 1/B)**n`` and
    ``c - a**2`` evaluated through ``expm1`` to avoid cancellation at large ``B``.
    Accepts scalar or array ``n``.
    """
    if B < 1:
        raise ValueError("need at least one bin")
    n_arr = np.asarray(n, dtype=float)
    if np.any(n_arr < 0):
        raise ValueError("photon number must be >= 0")
    if B == 1:
        mean = np.where(n_arr > 0, 1.0, 0.0)
        var = np.zeros_like(n_arr)
    else:
        a = np.exp(n_arr * math.log1p(-1.0 / B))
        with np.errstate(invalid="ignore"):
            corr = np.expm1(n_arr * math.log1p(-1.0 / (B - 1) ** 2)) if B > 2 else np.where(n_arr > 0, -1.0, 0.0)
        corr = np.where(n_arr == 0, 0.0, corr)
        mean = B * (1.0 - a)
        var = np.maximum(B * a * (1.0 - a) + B * (B - 1.0) * a * a * corr, 0.0)
    if np.ndim(n) == 0:
        return float(mean), float(var)
    return mean, var


def n_max_click(B: int) -> int | None:
    """Largest ``n`` whose click-count standard deviation stays <= 1.

    Scans upward from ``n = 0`` and stops at the first ``n`` with std > 1. Returns
    ``None`` when the std never exceeds 1 (fewer than 10 bins), i.e. every ``n`` qualifies.
    """
    if B < 1:
        raise ValueError("need at least one bin")
    if B == 1:
        return None
    # the std peaks near n ~ B ln 2 and decays once every bin is occupied
    limit = int(B * (math.log(B) + 50)) + 10
    step = max(1024, B)
    for start in range(0, limit, step):
        n = np.arange(start, min(start + step, limit))
        _, var = fock_click_stats(B, n)
        over = np.flatnonzero(var > 1.0)
        if over.size:
            return int(n[over[0]]) - 1
    return None


def detectors_for_unit_sigma(n: int) -> int:
    """Smallest bin count ``B`` from which on the click std for ``n`` photons stays <= 1.

    For fixed ``n`` the std is zero at ``B = 1``, rises, then falls roughly as
    ``n / sqrt(2 B)``; the answer is the upper edge of the std > 1 region.
    """
    if n < 0:
        raise ValueError("photon number must be >= 0")
    hi = max(2, n * n)
    grid = np.unique(np.geomspace(1, hi, 400).astype(np.int64))
    sd = np.sqrt([fock_click_stats(int(b), n)[1] for b in grid])
    if sd.max() <= 1.0:
        return 1
    lo = int(grid[np.flatnonzero(sd > 1.0)[-1]])  # std > 1 here, and the tail beyond is unimodal
    while fock_click_stats(hi, n)[1] > 1.0:
        hi *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fock_click_stats(mid, n)[1] > 1.0:
            lo = mid
        else:
            hi = mid
    return hi


def click_table(bins: Sequence[int] = (8, 28, 100, 1024)) -> list[tuple[int, int | None]]:
    return [(int(b), n_max_click(int(b))) for b in bins]


# --- blinding ------------------------------------------------------------------------


def zero_inflate(p, b: float) -> PhotonNumberDistribution:
    """``b * delta_{n,0} + (1 - b) * p``."""
    if not 0.0 <= b <= 1.0:
        raise ValueError("inflation probability must lie in [0, 1]")
    out = (1.0 - b) * np.asarray(p, dtype=float)
    out[0] += b
    return PhotonNumberDistribution(out)


def zero_inflated_moments(mean, var, b):
    """Moments after zero inflation: ``(1-b) mu`` and ``(1-b) var + b (1-b) mu**2``."""
    mean, var, b = np.asarray(mean, float), np.asarray(var, float), np.asarray(b, float)
    return (1 - b) * mean, (1 - b) * var + b * (1 - b) * mean**2


def capped_poisson_moments(lam, cap: int):
    """Mean and variance of ``min(N, cap)`` for ``N ~ Poisson(lam)``."""
    lam = np.asarray(lam, dtype=float)
    k = np.arange(cap)
    pmf = stats.poisson.pmf(k[:, None], lam.ravel()[None, :])
    tail = stats.poisson.sf(cap - 1, lam.ravel())
    mean = k @ pmf + cap * tail
    second = (k * k) @ pmf + cap * cap * tail
    return mean.reshape(lam.shape), np.maximum(second - mean**2, 0.0).reshape(lam.shape)


def blinded_variance_curve(incident_means, config: DetectorConfig, capped: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Predicted ensemble mean and variance of the detected photon number.

    Each bin is Poisson (optionally capped at the detector's PNR limit), zero-inflated
    with the blinding probability of the incident mean, and bins are independent.
    """
    from pnrcount.sim import path_fractions

    nbar = np.atleast_1d(np.asarray(incident_means, dtype=float))
    frac = path_fractions(config) * config.bin_efficiency
    lam = nbar[:, None] * frac[None, :]
    if capped:
        mu, var = capped_poisson_moments(lam, config.n_cap)
    else:
        mu, var = lam, lam
    b = config.blinding.probability(nbar)[:, None]
    m, v = zero_inflated_moments(mu, var, b)
    return m.sum(axis=1), v.sum(axis=1)


# --- ensemble reductions -------------------------------------------------------------


@dataclass
class MomentAccumulator:
    """Streaming count, mean and central moments up to order 4.

    ``merge`` is associative and commutative (pairwise update formulas), so partial
    results from parallel workers can be combined in any order.
    """

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0
    m3: float = 0.0
    m4: float = 0.0

    @classmethod
    def of(cls, x) -> "MomentAccumulator":
        x = np.asarray(x, dtype=float).ravel()
        if x.size == 0:
            return cls()
        mu = float(x.mean())
        d = x - mu
        d2 = d * d
        return cls(x.size, mu, float(d2.sum()), float((d2 * d).sum()), float((d2 * d2).sum()))

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.n == 0:
            return MomentAccumulator(self.n, self.mean, self.m2, self.m3, self.m4)
        if self.n == 0:
            return MomentAccumulator(other.n, other.mean, other.m2, other.m3, other.m4)
        na, nb = self.n, other.n
        n = na + nb
        delta = other.mean - self.mean
        d_n = delta / n
        mean = self.mean + nb * d_n
        m2 = self.m2 + other.m2 + delta * d_n * na * nb
        m3 = (
            self.m3
            + other.m3
            + delta * d_n * d_n * na * nb * (na - nb)
            + 3.0 * d_n * (na * other.m2 - nb * self.m2)
        )
        m4 = (
            self.m4
            + other.m4
            + delta * d_n**3 * na * nb * (na * na - na * nb + nb * nb)
            + 6.0 * d_n * d_n * (na * na * other.m2 + nb * nb * self.m2)
            + 4.0 * d_n * (na * other.m3 - nb * self.m3)
        )
        return MomentAccumulator(n, mean, m2, m3, m4)

    __add__ = merge

    @property
    def variance(self) -> float:
        """Unbiased sample variance."""
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    def central(self, k: int) -> float:
        """Population central moment of order 2, 3 or 4."""
        return {2: self.m2, 3: self.m3, 4: self.m4}[k] / self.n


def g2_standard_error(acc: MomentAccumulator) -> float:
    """Delta-method standard error of ``g2_zero(mean, variance)``."""
    if acc.n < 2 or acc.mean <= 0:
        return math.nan
    m, v = acc.mean, acc.variance
    mu3, mu4 = acc.central(3), acc.central(4)
    dm = -1.0 / m**2 - 2.0 * (v - m) / m**3
    dv = 1.0 / m**2
    var_m = v / acc.n
    var_v = max(mu4 - v * v, 0.0) / acc.n
    cov = mu3 / acc.n
    return math.sqrt(max(dm * dm * var_m + dv * dv * var_v + 2 * dm * dv * cov, 0.0))


@dataclass(frozen=True)
class EnsembleSummary:
    incident_mean: float
    measured_mean: float
    measured_variance: float
    shots: int
    g2: float
    g2_err: float
    noise_db: float
    efficiency: float
    efficiency_click: float = math.nan

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("summary needs at least one shot")
        if self.measured_variance < 0:
            raise ValueError("variance must be >= 0")

    CSV_COLUMNS = (
        "incident_mean",
        "measured_mean",
        "variance",
        "g2",
        "g2_err",
        "noise_db",
        "efficiency_pnr",
        "efficiency_click",
    )

    def row(self) -> tuple[float, ...]:
        return (
            self.incident_mean,
            self.measured_mean,
            self.measured_variance,
            self.g2,
            self.g2_err,
            self.noise_db,
            self.efficiency,
            self.efficiency_click,
        )


def summarize(
    measured_means,
    incident_mean: float,
    clicks=None,
    acc: MomentAccumulator | None = None,
) -> EnsembleSummary:
    """Summarize one state's per-shot measured means (or a prebuilt accumulator).

    ``clicks`` (per-shot click counts) enables the click-mode efficiency estimate.
    Undefined quantities (zero mean, no zero-click shots) are NaN.
    """
    acc = MomentAccumulator.of(measured_means) if acc is None else acc
    if acc.n < 1:
        raise ValueError("no shots to summarize")
    m, v = acc.mean, acc.variance
    g2 = g2_zero(m, v) if m > 0 else math.nan
    g2_err = g2_standard_error(acc) if m > 0 else math.nan
    noise = relative_noise_db(m, math.sqrt(v)) if m > 0 else math.nan
    eff = efficiency_pnr(m, incident_mean) if incident_mean > 0 else math.nan
    eff_click = math.nan
    if clicks is not None and incident_mean > 0:
        p0 = float(np.mean(np.asarray(clicks) == 0))
        if p0 > 0:
            eff_click = efficiency_click(p0, incident_mean)
    return EnsembleSummary(float(incident_mean), m, v, acc.n, g2, g2_err, noise, eff, eff_click)


def weighted_g2(summaries: Sequence[EnsembleSummary]) -> tuple[float, float]:
    """Inverse-variance weighted mean of g2 and its standard error, skipping undefined states."""
    g = np.array([s.g2 for s in summaries], dtype=float)
    e = np.array([s.g2_err for s in summaries], dtype=float)
    ok = np.isfinite(g) & np.isfinite(e) & (e > 0)
    if not ok.any():
        raise ValueError("no state with a defined g2 standard error")
    w = 1.0 / e[ok] ** 2
    return float((w * g[ok]).sum() / w.sum()), float(1.0 / math.sqrt(w.sum()))


# --- per-shot precision report -------------------------------------------------------


@dataclass(frozen=True)
class SigmaBand:
    measured_n: int
    shots: int
    median: float
    lower: float  # 0.15 % quantile
    upper: float  # 99.85 % quantile


def sigma_report(measured_mean, measured_std) -> list[SigmaBand]:
    """Median and central 99.7 % interval of the per-shot std, per integer measured mean."""
    mean = np.asarray(measured_mean, dtype=float)
    std = np.asarray(measured_std, dtype=float)
    key = np.rint(mean).astype(np.int64)
    order = np.argsort(key, kind="stable")
    key, std = key[order], std[order]
    uniq, starts = np.unique(key, return_index=True)
    bands = []
    for n, chunk in zip(uniq, np.split(std, starts[1:])):
        lo, med, hi = np.quantile(chunk, [0.0015, 0.5, 0.9985])
        bands.append(SigmaBand(int(n), chunk.size, float(med), float(lo), float(hi)))
    return bands


def sub_sigma_boundary(measured_mean, measured_std, threshold: float = 1.0) -> float:
    """Lowest measured mean among shots with std >= ``threshold`` (``inf`` if none).

    Every shot below the returned value has a std under the threshold.
    """
    mean = np.asarray(measured_mean, dtype=float)
    std = np.asarray(measured_std, dtype=float)
    over = std >= threshold
    return float(mean[over].min()) if over.any() else math.inf


def sub_poisson_fraction(measured_mean, measured_std, min_mean: float = 1.0) -> float:
    """Fraction of shots with measured mean >= ``min_mean`` that satisfy ``std < sqrt(mean)``."""
    mean = np.asarray(measured_mean, dtype=float)
    std = np.asarray(measured_std, dtype=float)
    sel = mean >= min_mean
    if not sel.any():
        return math.nan
    return float(np.mean(std[sel] < np.sqrt(mean[sel])))
