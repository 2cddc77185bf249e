"""Exponentially modified Gaussian arrival-time models per photon number.

All times are in picoseconds. A :class:`BinTimingModel` holds one EMG component
per photon number ``n = 1..n_cap``; more photons arrive earlier, so component
means ``mu + tau`` decrease strictly with ``n``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage, optimize, signal, special, stats

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class FitError(RuntimeError):
    """Raised when a mixture fit fails; ``best`` holds the best-so-far result if any."""

    def __init__(self, message: str, best: "FitResult | None" = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class EmgParams:
    mu: float
    sigma: float
    tau: float

    def __post_init__(self):
        for name in ("mu", "sigma", "tau"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"EMG {name} must be finite, got {v}")
        if self.sigma <= 0 or self.tau <= 0:
            raise ValueError(f"EMG sigma and tau must be positive, got {self.sigma}, {self.tau}")

    @property
    def mean(self) -> float:
        return self.mu + self.tau

    @property
    def variance(self) -> float:
        return self.sigma**2 + self.tau**2


class Component(NamedTuple):
    n: int
    params: EmgParams
    weight: float


@dataclass(frozen=True, eq=False)
class BinTimingModel:
    """EMG mixture for one detection bin, one component per photon number."""

    components: tuple[Component, ...]
    mu: np.ndarray = field(init=False, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)
    tau: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        comps = tuple(Component(int(c[0]), c[1], float(c[2])) for c in self.components)
        if not comps:
            raise ValueError("timing model needs at least one component")
        ns = [c.n for c in comps]
        if ns != list(range(1, len(comps) + 1)):
            raise ValueError(f"components must cover n = 1..n_cap exactly once, got {ns}")
        w = np.array([c.weight for c in comps])
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("component weights must be >= 0 and sum to 1")
        means = np.array([c.params.mean for c in comps])
        if np.any(np.diff(means) >= 0):
            raise ValueError("component mean arrival times must decrease strictly with n")
        object.__setattr__(self, "components", comps)
        for name, values in (
            ("mu", [c.params.mu for c in comps]),
            ("sigma", [c.params.sigma for c in comps]),
            ("tau", [c.params.tau for c in comps]),
            ("weights", w),
        ):
            arr = np.asarray(values, dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_cap(self) -> int:
        return len(self.components)

    @classmethod
    def from_arrays(cls, mu, sigma, tau, weights) -> "BinTimingModel":
        return cls(
            tuple(
                Component(i + 1, EmgParams(float(m), float(s), float(t)), float(w))
                for i, (m, s, t, w) in enumerate(zip(mu, sigma, tau, weights))
            )
        )

    def params(self, n: int) -> EmgParams:
        return self.components[n - 1].params

    def component_logpdf(self, t) -> np.ndarray:
        """Log-density of every component at ``t``; shape ``(n_cap,) + t.shape``."""
        t = np.asarray(t, dtype=float)
        idx = (slice(None),) + (None,) * t.ndim
        return _emg_logpdf(t[None, ...], self.mu[idx], self.sigma[idx], self.tau[idx])

    def pdf(self, t) -> np.ndarray:
        """Mixture density."""
        return np.einsum("k,k...->...", self.weights, np.exp(self.component_logpdf(t)))

    def cdf(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = (slice(None),) + (None,) * t.ndim
        comp = _emg_cdf(t[None, ...], self.mu[idx], self.sigma[idx], self.tau[idx])
        return np.einsum("k,k...->...", self.weights, comp)

    def with_weights(self, weights) -> "BinTimingModel":
        return BinTimingModel.from_arrays(self.mu, self.sigma, self.tau, weights)


@dataclass(frozen=True, eq=False)
class ArrivalHistogram:
    bin_width: float
    origin: float
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if not self.bin_width > 0:
            raise ValueError("histogram bin width must be positive")
        if counts.ndim != 1 or counts.size < 1:
            raise ValueError("histogram needs at least one bin")
        if np.any(counts < 0):
            raise ValueError("histogram counts must be nonnegative")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def edges(self) -> np.ndarray:
        return self.origin + self.bin_width * np.arange(self.counts.size + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.origin + self.bin_width * (np.arange(self.counts.size) + 0.5)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_samples(cls, samples, origin: float, bin_width: float, n_bins: int) -> "ArrivalHistogram":
        edges = origin + bin_width * np.arange(n_bins + 1)
        counts, _ = np.histogram(np.asarray(samples, dtype=float), bins=edges)
        return cls(bin_width, origin, counts)


# --- EMG density -----------------------------------------------------------------


def _emg_logpdf(t, mu, sigma, tau):
    # z >= 0 branch uses erfcx so the exp(sigma^2/2tau^2) factor never overflows.
    x = t - mu
    z = (sigma / tau - x / sigma) / _SQRT2
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        pos = -(x * x) / (2.0 * sigma * sigma) + np.log(special.erfcx(np.maximum(z, 0.0)))
        neg = 0.5 * (sigma / tau) ** 2 - x / tau + np.log(special.erfc(np.minimum(z, 0.0)))
    return np.where(z >= 0, pos, neg) - np.log(2.0 * tau)


def _emg_cdf(t, mu, sigma, tau):
    x = t - mu
    # F = Phi(x/sigma) - tau * f(t), from tau f' = gaussian - f.
    tail = tau * np.exp(_emg_logpdf(t, mu, sigma, tau))
    return np.clip(special.ndtr(x / sigma) - tail, 0.0, 1.0)


def _check_times(t) -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("EMG evaluation time must be finite")
    return arr


def emg_logpdf(t, p: EmgParams):
    t = _check_times(t)
    out = _emg_logpdf(t, p.mu, p.sigma, p.tau)
    return out if out.ndim else float(out)


def emg_pdf(t, p: EmgParams):
    """Density of Gaussian(mu, sigma) convolved with Exponential(mean tau), in 1/ps."""
    t = _check_times(t)
    out = np.exp(_emg_logpdf(t, p.mu, p.sigma, p.tau))
    return out if out.ndim else float(out)


def emg_cdf(t, p: EmgParams):
    t = _check_times(t)
    out = _emg_cdf(t, p.mu, p.sigma, p.tau)
    return out if out.ndim else float(out)


def emg_sample(rng: np.random.Generator, p: EmgParams, size=None):
    """Gaussian draw plus exponential draw; deterministic for a seeded generator."""
    return rng.normal(p.mu, p.sigma, size) + rng.exponential(p.tau, size)


def family_model(
    n_cap: int = 15,
    t0: float = 330.0,
    slope: float = 110.0,
    sigma0: float = 8.0,
    tau0: float = 12.0,
    weights: Sequence[float] | None = None,
) -> BinTimingModel:
    """Synthetic per-n model: ``mu_n = t0 - slope ln n``, ``sigma_n = sigma0/sqrt n``,
    ``tau_n = tau0/n``. Weights default to uniform."""
    n = np.arange(1, n_cap + 1, dtype=float)
    w = np.full(n_cap, 1.0 / n_cap) if weights is None else np.asarray(weights, dtype=float)
    return BinTimingModel.from_arrays(t0 - slope * np.log(n), sigma0 / np.sqrt(n), tau0 / n, w)


# --- fitting -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FitResult:
    """Fitted model plus residual diagnostics.

    ``param_errors`` has shape ``(n_cap, 4)`` with columns mu, sigma, tau, weight
    (one-sigma, from the inverse Fisher information).
    """

    model: BinTimingModel
    deviance: float
    chi2: float
    dof: int
    p_value: float
    param_errors: np.ndarray
    pearson_residuals: np.ndarray
    expected: np.ndarray
    iterations: int
    converged: bool
    starts: int


class _Parameterization(NamedTuple):
    n_params: int
    unpack: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]


def _softmax_weights(logits_tail: np.ndarray, k: int) -> np.ndarray:
    logits = np.concatenate(([0.0], logits_tail))[:k]
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _free_param(k: int) -> _Parameterization:
    def unpack(theta):
        mu = theta[0:k]
        sigma = np.exp(theta[k : 2 * k])
        tau = np.exp(theta[2 * k : 3 * k])
        return mu, sigma, tau, _softmax_weights(theta[3 * k :], k)

    return _Parameterization(4 * k - 1, unpack)


def _family_param(k: int) -> _Parameterization:
    n = np.arange(1, k + 1, dtype=float)

    def unpack(theta):
        t0, slope, lsig, ltau = theta[:4]
        return t0 - slope * np.log(n), np.exp(lsig) / np.sqrt(n), np.exp(ltau) / n, _softmax_weights(theta[4:], k)

    return _Parameterization(4 + k - 1, unpack)


def _expected_counts(theta, par: _Parameterization, edges, total):
    mu, sigma, tau, w = par.unpack(theta)
    cdf = _emg_cdf(edges[None, :], mu[:, None], sigma[:, None], tau[:, None])
    mass = w @ np.diff(cdf, axis=1)
    inside = mass.sum()
    if not np.isfinite(inside) or inside <= 0:
        return None
    # conditional on landing inside the histogram range
    return total * mass / inside


def _deviance(y, lam):
    lam = np.maximum(lam, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / lam), 0.0)
    return 2.0 * float(np.sum(term - (y - lam)))


def _jacobian(theta, par, edges, total, lam0):
    jac = np.empty((lam0.size, theta.size))
    for j in range(theta.size):
        h = 1e-6 * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        lp = _expected_counts(tp, par, edges, total)
        lm = _expected_counts(tm, par, edges, total)
        if lp is None or lm is None:
            lp = lp if lp is not None else lam0
            lm = lm if lm is not None else lam0
        jac[:, j] = (lp - lm) / (2 * h)
    return jac


def _damped_gauss_newton(theta, par, edges, y, total, max_iter, rtol):
    lam = _expected_counts(theta, par, edges, total)
    if lam is None:
        return theta, np.inf, 0, False
    dev = _deviance(y, lam)
    damping = 1e-3
    for it in range(1, max_iter + 1):
        jac = _jacobian(theta, par, edges, total, lam)
        wts = 1.0 / np.maximum(lam, 1e-12)
        fisher = jac.T @ (jac * wts[:, None])
        score = jac.T @ ((y - lam) * wts)
        diag = np.maximum(np.diag(fisher), 1e-12)
        improved = False
        while damping < 1e12:
            try:
                step = np.linalg.solve(fisher + damping * np.diag(diag), score)
            except np.linalg.LinAlgError:
                damping *= 10
                continue
            cand = theta + step
            lam_c = _expected_counts(cand, par, edges, total)
            if lam_c is not None and np.all(np.isfinite(lam_c)):
                dev_c = _deviance(y, lam_c)
                if dev_c <= dev:
                    improved = True
                    break
            damping *= 10
        if not improved:
            # no descent direction left: at a (local) optimum
            return theta, dev, it, True
        change = dev - dev_c
        theta, lam, dev = cand, lam_c, dev_c
        damping = max(damping * 0.3, 1e-9)
        if change <= rtol * max(dev, 1.0) and np.max(np.abs(step)) < 1e-6 * (1 + np.max(np.abs(theta))):
            return theta, dev, it, True
    return theta, dev, max_iter, False


def _peak_seeds(hist: ArrivalHistogram, k: int) -> list[tuple[float, float]]:
    """Candidate (position, width) pairs for up to ``k`` components, latest peak first."""
    smooth = ndimage.gaussian_filter1d(hist.counts.astype(float), 2.0)
    peaks, props = signal.find_peaks(smooth, prominence=max(smooth.max() * 1e-3, 1.0))
    centers = hist.centers
    if peaks.size:
        widths = signal.peak_widths(smooth, peaks, rel_height=0.5)[0] * hist.bin_width
        order = np.argsort(props["prominences"])[::-1][:k]
        seeds = [(centers[peaks[i]], max(widths[i], 2 * hist.bin_width)) for i in order]
    else:
        seeds = []
    if len(seeds) < k:
        c = hist.counts.astype(float)
        cdf = np.cumsum(c) / c.sum()
        spread = float(np.sqrt(np.average((centers - np.average(centers, weights=c)) ** 2, weights=c)))
        for q in np.linspace(0.9, 0.1, k):
            if len(seeds) >= k:
                break
            pos = centers[min(np.searchsorted(cdf, q), centers.size - 1)]
            if all(abs(pos - s[0]) > 2 * hist.bin_width for s in seeds):
                seeds.append((pos, max(spread / k, 2 * hist.bin_width)))
        while len(seeds) < k:
            last = min(s[0] for s in seeds) if seeds else centers[c.argmax()]
            seeds.append((last - spread / k, max(spread / k, 2 * hist.bin_width)))
    return sorted(seeds, key=lambda s: -s[0])


def _starts_free(seeds, k, ratios, heights):
    for r in ratios:
        theta = np.empty(4 * k - 1)
        for i, (pos, width) in enumerate(seeds):
            scale = width / 2.355
            sig = scale / math.sqrt(1 + r * r)
            tau = r * sig
            theta[i] = pos - 0.7 * tau
            theta[k + i] = math.log(max(sig, 1e-3))
            theta[2 * k + i] = math.log(max(tau, 1e-3))
        h = np.maximum(np.asarray(heights, dtype=float), 1e-6)
        theta[3 * k :] = np.log(h[1:] / h[0])
        yield theta


def _prominent_peaks(hist: ArrivalHistogram, rel_prominence: float = 0.01) -> list[tuple[float, float]]:
    """(position, width) of clearly resolved peaks, latest first."""
    smooth = ndimage.gaussian_filter1d(hist.counts.astype(float), 2.0)
    peaks, props = signal.find_peaks(smooth, prominence=max(smooth.max() * rel_prominence, 1.0))
    if not peaks.size:
        c = hist.counts.astype(float)
        return [(float(hist.centers[c.argmax()]), 10 * hist.bin_width)]
    widths = signal.peak_widths(smooth, peaks, rel_height=0.5)[0] * hist.bin_width
    out = [(float(hist.centers[p]), max(float(w), 2 * hist.bin_width)) for p, w in zip(peaks, widths)]
    return sorted(out, key=lambda s: -s[0])


def _starts_family(hist: ArrivalHistogram, k: int, ratios):
    peaks = _prominent_peaks(hist)
    pos1, width1 = peaks[0]
    slopes = [(pos1 - p) / math.log(n) for n, (p, _) in zip(range(2, 4), peaks[1:3])]
    if not slopes:
        slopes = [width1]
    edges = hist.edges
    y = hist.counts.astype(float)
    for slope in slopes:
        for r in ratios:
            scale = width1 / 2.355
            sig = scale / math.sqrt(1 + r * r)
            tau = r * sig
            theta = np.zeros(4 + k - 1)
            theta[:4] = [pos1 - 0.7 * tau, max(slope, 1.0), math.log(sig), math.log(tau)]
            # weights from a nonnegative least-squares fit of the component shapes
            mu, sigma, tau_n, _ = _family_param(k).unpack(theta)
            shapes = np.diff(_emg_cdf(edges[None, :], mu[:, None], sigma[:, None], tau_n[:, None]), axis=1)
            w, _ = optimize.nnls(shapes.T, y)
            w = np.maximum(w, 1e-4 * max(w.max(), 1e-300))
            theta[4:] = np.log(w[1:] / w[0])
            yield theta


def fit_mixture(
    hist: ArrivalHistogram,
    n_cap: int,
    *,
    family: bool = False,
    max_iter: int = 200,
    rtol: float = 1e-10,
) -> FitResult:
    """Fit an ``n_cap``-component EMG mixture to an arrival-time histogram.

    The loss is the Poisson deviance of bin-integrated expected counts, minimized
    by damped Gauss-Newton (Fisher scoring) from several starts seeded by peak
    detection. With ``family=True`` the components are tied by the scaling
    ``mu_n = t0 - a ln n``, ``sigma_n = sigma0/sqrt n``, ``tau_n = tau0/n`` and only
    the weights are free per component, which keeps high-``n`` shapes
    identifiable when those components carry little data.

    Components are relabelled so the latest-arriving one is ``n = 1``.
    """
    if n_cap < 1:
        raise ValueError("n_cap must be >= 1")
    y = hist.counts.astype(float)
    total = float(y.sum())
    if total < 1e3:
        raise ValueError(f"histogram has {int(total)} counts; at least 1000 are required")
    par = _family_param(n_cap) if family else _free_param(n_cap)
    populated = int(np.count_nonzero(y))
    if populated < par.n_params:
        raise ValueError(
            f"histogram has {populated} populated bins but the model has {par.n_params} free parameters"
        )
    edges = hist.edges
    ratios = (0.5, 1.0, 2.0)
    if family:
        starts = list(_starts_family(hist, n_cap, ratios))
    else:
        seeds = _peak_seeds(hist, n_cap)
        heights = [y[np.clip(np.searchsorted(edges, s[0]) - 1, 0, y.size - 1)] for s in seeds]
        starts = list(_starts_free(seeds, n_cap, ratios, heights))

    best = None
    for theta0 in starts:
        theta, dev, iters, ok = _damped_gauss_newton(theta0, par, edges, y, total, max_iter, rtol)
        if best is None or dev < best[1]:
            best = (theta, dev, iters, ok)
    theta, dev, iters, ok = best
    if not np.isfinite(dev):
        raise FitError("mixture fit failed from every start")
    result = _finish(theta, par, edges, y, total, dev, iters, ok, len(starts), family, n_cap)
    if not ok:
        raise FitError(f"mixture fit did not converge in {max_iter} iterations", best=result)
    return result


def _finish(theta, par, edges, y, total, dev, iters, ok, n_starts, family, k) -> FitResult:
    mu, sigma, tau, w = par.unpack(theta)
    lam = _expected_counts(theta, par, edges, total)
    jac = _jacobian(theta, par, edges, total, lam)
    fisher = jac.T @ (jac / np.maximum(lam, 1e-12)[:, None])
    cov = np.linalg.pinv(fisher)

    # delta method from internal parameters to (mu, sigma, tau, weight)
    def natural(th):
        m, s, t, ww = par.unpack(th)
        return np.concatenate([m, s, t, ww])

    base = natural(theta)
    dnat = np.empty((base.size, theta.size))
    for j in range(theta.size):
        h = 1e-7 * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tp[j] += h
        dnat[:, j] = (natural(tp) - base) / h
    var = np.einsum("ij,jk,ik->i", dnat, cov, dnat)
    errs = np.sqrt(np.maximum(var, 0.0)).reshape(4, k).T

    order = np.argsort(-(mu + tau), kind="stable")
    mu, sigma, tau, w, errs = mu[order], sigma[order], tau[order], w[order], errs[order]
    w = w / w.sum()
    means = mu + tau
    if np.any(np.diff(means) >= 0):
        raise FitError("fitted components have coincident mean arrival times")
    model = BinTimingModel.from_arrays(mu, sigma, tau, w)

    resid = (y - lam) / np.sqrt(np.maximum(lam, 1e-12))
    chi2, dof, p = chi2_gof(y, lam, n_fitted=par.n_params)
    return FitResult(model, dev, chi2, dof, p, errs, resid, lam, iters, ok, n_starts)


def chi2_gof(observed, expected, n_fitted: int = 0, min_expected: float = 5.0) -> tuple[float, int, float]:
    """Pearson chi-square with adjacent low-expectation bins merged.

    Returns ``(statistic, dof, p_value)``; dof subtracts one for the fixed total and
    ``n_fitted`` for parameters estimated from ``observed``.
    """
    obs = np.asarray(observed, dtype=float)
    exp_ = np.asarray(expected, dtype=float)
    o_groups, e_groups = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(obs, exp_):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            o_groups.append(acc_o)
            e_groups.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if e_groups:
            o_groups[-1] += acc_o
            e_groups[-1] += acc_e
        else:
            o_groups.append(acc_o)
            e_groups.append(acc_e)
    o_arr = np.array(o_groups)
    e_arr = np.array(e_groups)
    stat = float(np.sum((o_arr - e_arr) ** 2 / e_arr))
    dof = max(len(o_arr) - 1 - n_fitted, 1)
    return stat, dof, float(stats.chi2.sf(stat, dof))


# --- model files ---------------------------------------------------------------

MODEL_FORMAT = "pnrcount-timing-models"
MODEL_VERSION = 1


def model_to_dict(model: BinTimingModel) -> dict:
    return {
        "n_cap": model.n_cap,
        "components": [
            {"n": c.n, "mu_ps": c.params.mu, "sigma_ps": c.params.sigma, "tau_ps": c.params.tau, "weight": c.weight}
            for c in model.components
        ],
    }


def model_from_dict(d: dict) -> BinTimingModel:
    comps = d["components"]
    if len(comps) != d["n_cap"]:
        raise ValueError(f"model lists {len(comps)} components but n_cap = {d['n_cap']}")
    return BinTimingModel(
        tuple(
            Component(int(c["n"]), EmgParams(float(c["mu_ps"]), float(c["sigma_ps"]), float(c["tau_ps"])), float(c["weight"]))
            for c in comps
        )
    )


def save_models(path, models: Sequence[BinTimingModel]) -> None:
    """Write per-bin models as JSON (see README for the schema)."""
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "time_unit": "ps",
        "bins": [dict(bin=i, **model_to_dict(m)) for i, m in enumerate(models)],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_models(path) -> list[BinTimingModel]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} v{MODEL_VERSION} document")
    bins = doc["bins"]
    if [b["bin"] for b in bins] != list(range(len(bins))):
        raise ValueError(f"{path}: bins must be listed in order 0..{len(bins) - 1}")
    cache: dict[str, BinTimingModel] = {}
    out = []
    for b in bins:
        key = json.dumps(b["components"], sort_keys=True)
        if key not in cache:
            cache[key] = model_from_dict(b)
        out.append(cache[key])
    return out
