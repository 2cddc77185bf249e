"""Detector tomography with coherent probes.

Solves ``min ||F Pi - P||_F^2 + gamma ||D Pi||_F^2`` over row-stochastic ``Pi``, where
``F`` holds the probe photon-number distributions, ``P`` the measured outcome
frequencies and ``D`` is the first difference along the input photon number.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

TRUNCATION_TOL = 1e-10
FEASIBILITY_TOL = 1e-8
_POVM_HEADER = struct.Struct("<QQ")


class TruncationError(ValueError):
    pass


def build_probe_matrix(means: Sequence[float], M: int, tol: float = TRUNCATION_TOL) -> np.ndarray:
    """``F[d, m] = exp(-mu_d) mu_d**m / m!`` for ``m = 0..M-1``, evaluated in log space.

    Raises :class:`TruncationError` if any row loses more than ``tol`` mass beyond ``M - 1``.
    """
    mu = np.asarray(means, dtype=float)
    if mu.ndim != 1 or mu.size == 0:
        raise ValueError("need a nonempty 1-D sequence of probe means")
    if np.any(mu < 0) or not np.all(np.isfinite(mu)):
        raise ValueError("probe means must be finite and >= 0")
    if M < 1:
        raise ValueError("M must be >= 1")
    lost = stats.poisson.sf(M - 1, mu)
    if np.any(lost > tol):
        d = int(np.argmax(lost))
        need = int(stats.poisson.isf(tol, mu.max())) + 1
        raise TruncationError(
            f"probe {d} (mean {mu[d]:g}) loses {lost[d]:.3g} of its mass above m = {M - 1}; use M >= {need}"
        )
    m = np.arange(M)
    return stats.poisson.pmf(m[None, :], mu[:, None])


def build_outcome_matrix(shot_means: Sequence[Sequence[float]], N: int) -> np.ndarray:
    """Row ``d`` is the normalized histogram of ``floor(x + 0.5)`` over state ``d``'s shots."""
    rows = []
    for d, x in enumerate(shot_means):
        x = np.asarray(x, dtype=float).ravel()
        if x.size < 1:
            raise ValueError(f"state {d} has no shots")
        k = np.floor(x + 0.5).astype(np.int64)
        if k.max() >= N:
            raise ValueError(f"state {d}: measured mean {x.max():g} needs N > {k.max()}; widen N")
        if k.min() < 0:
            raise ValueError(f"state {d}: negative measured mean")
        rows.append(np.bincount(k, minlength=N) / x.size)
    return np.vstack(rows)


def simplex_project(v, out: np.ndarray | None = None) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex.

    Sort-based threshold method; works on a 1-D vector or row-wise on a 2-D array.
    """
    v = np.asarray(v, dtype=float)
    if v.size == 0 or v.shape[-1] == 0:
        raise ValueError("cannot project an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("entries must be finite")
    vec = v.ndim == 1
    a = v[None, :] if vec else v
    n = a.shape[1]
    u = -np.sort(-a, axis=1)
    css = np.cumsum(u, axis=1)
    css -= 1.0
    ind = np.arange(1, n + 1)
    cond = u * ind > css
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(a.shape[0]), rho] / (rho + 1)
    res = np.subtract(a, theta[:, None], out=None if out is None else (out[None, :] if vec else out))
    np.maximum(res, 0.0, out=res)
    return res[0] if vec else res


def _project_rows(src: np.ndarray, dst: np.ndarray, chunk: int, pool: ThreadPoolExecutor | None) -> None:
    starts = range(0, src.shape[0], chunk)

    def work(s):
        simplex_project(src[s : s + chunk], out=dst[s : s + chunk])

    if pool is None:
        for s in starts:
            work(s)
    else:
        list(pool.map(work, starts))


def _smooth_grad(x: np.ndarray, out: np.ndarray, scale: float, chunk: int = 512) -> None:
    """``out += scale * D^T D x`` for the first difference along rows, in row chunks."""
    for s in range(0, x.shape[0] - 1, chunk):
        d = x[s + 1 : s + chunk + 1] - x[s : s + chunk][: x.shape[0] - 1 - s]
        d *= scale
        out[s : s + d.shape[0]] -= d
        out[s + 1 : s + 1 + d.shape[0]] += d


def _smooth_value(x: np.ndarray, chunk: int = 512) -> float:
    total = 0.0
    for s in range(0, x.shape[0] - 1, chunk):
        d = x[s + 1 : s + chunk + 1] - x[s : s + chunk][: x.shape[0] - 1 - s]
        total += float(np.einsum("ij,ij->", d, d))
    return total


@dataclass
class PovmResult:
    povm: np.ndarray
    converged: bool
    iterations: int
    objective: np.ndarray  # value after every iteration
    restarts: list[int]
    residual: float  # ||F Pi - P||_F
    constraint_violation: float
    gamma: float
    lipschitz: float
    stop_reason: str = ""
    extra: dict = field(default_factory=dict)

    def diagnostics_rows(self):
        for k, f in enumerate(self.objective):
            yield k, float(f)


def default_gamma(P: np.ndarray, M: int) -> float:
    return 1e-2 * float(np.sum(P * P)) / M


def reconstruct_povm(
    F: np.ndarray,
    P: np.ndarray,
    gamma: float | None = None,
    *,
    max_iter: int = 50_000,
    rtol: float = 1e-9,
    window: int = 10,
    x0: np.ndarray | None = None,
    chunk_rows: int = 256,
    workers: int = 1,
) -> PovmResult:
    """Regularized simplex-constrained least squares by accelerated projected gradient.

    FISTA with function-value restart: if a step would raise the objective, the
    momentum is reset and a plain projected-gradient step is taken instead, so the
    objective trace never increases. Working memory is three ``M x N`` arrays plus
    ``D x N`` and row-chunk workspaces. Stops when the objective changes by less than
    ``rtol`` (relative) over ``window`` iterations, or when it reaches the
    floating-point floor of an exact fit.
    """
    F = np.asarray(F, dtype=float)
    P = np.asarray(P, dtype=float)
    if F.ndim != 2 or P.ndim != 2 or F.shape[0] != P.shape[0]:
        raise ValueError(f"dimension mismatch: F {F.shape}, P {P.shape}")
    D, M = F.shape
    N = P.shape[1]
    if D < 2:
        raise ValueError("need at least two probe states")
    gamma = default_gamma(P, M) if gamma is None else float(gamma)
    if gamma < 0:
        raise ValueError("gamma must be >= 0")

    L = 2.0 * (np.linalg.norm(F, 2) ** 2 + 4.0 * gamma)
    floor = 1e-28 * max(float(np.sum(P * P)), 1e-300)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    X = np.full((M, N), 1.0 / N) if x0 is None else np.array(x0, dtype=float)
    if X.shape != (M, N):
        raise ValueError(f"x0 must have shape {(M, N)}")
    if x0 is not None:
        _project_rows(X.copy(), X, chunk_rows, pool)
    Y = X.copy()
    G = np.empty_like(X)

    def objective(FX, Z):
        r = FX - P
        return float(np.einsum("ij,ij->", r, r)) + gamma * _smooth_value(Z)

    def step_from(src, R, dst):
        # dst <- proj(src - grad(src) / L); R = F src - P
        np.matmul(F.T, R, out=dst)
        dst *= 2.0
        _smooth_grad(src, dst, 2.0 * gamma)
        dst *= -1.0 / L
        dst += src
        _project_rows(dst, dst, chunk_rows, pool)

    FX = F @ X
    f_x = objective(FX, X)
    FY = FX.copy()
    t = 1.0
    trace = []
    restarts = []
    converged = False
    reason = "iteration cap"
    k = 0
    try:
        for k in range(1, max_iter + 1):
            step_from(Y, FY - P, G)
            FZ = F @ G
            f_z = objective(FZ, G)
            if f_z > f_x:
                restarts.append(k)
                t = 1.0
                step_from(X, FX - P, G)
                FZ = F @ G
                f_z = objective(FZ, G)
                if f_z > f_x:
                    # no descent left at working precision
                    converged, reason = True, "stalled"
                    break
                Y[...] = G
                X, G = G, X
                FX = FZ
                FY = FZ.copy()
            else:
                t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
                beta = (t - 1.0) / t_next
                t = t_next
                # Y <- (1 + beta) Z - beta X, built in X's buffer, then rotate buffers
                X *= -beta / (1.0 + beta)
                X += G
                X *= 1.0 + beta
                FY = (1.0 + beta) * FZ - beta * FX
                X, Y, G = G, X, Y
                FX = FZ
            f_x = f_z
            trace.append(f_x)
            if f_x <= floor:
                converged, reason = True, "exact fit"
                break
            if k > window:
                prev = trace[-1 - window]
                if prev - f_x <= rtol * max(abs(f_x), 1e-300):
                    converged, reason = True, "relative objective change"
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    violation = max(float(np.abs(X.sum(axis=1) - 1.0).max()), float(max(-X.min(), 0.0)))
    residual = float(np.linalg.norm(F @ X - P))
    return PovmResult(X, converged, k, np.asarray(trace), restarts, residual, violation, gamma, L, reason)


def ridge_slope(povm: np.ndarray, m_range: tuple[int, int] | None = None) -> float:
    """Slope of the most likely outcome ``argmax_n' Pi[m, n']`` against ``m`` (least squares)."""
    povm = np.asarray(povm)
    lo, hi = (0, povm.shape[0]) if m_range is None else m_range
    m = np.arange(lo, hi)
    ridge = povm[lo:hi].argmax(axis=1)
    slope, _ = np.polyfit(m, ridge, 1)
    return float(slope)


def binomial_loss_povm(M: int, N: int, eta: float) -> np.ndarray:
    """``Pi[m, n'] = Binomial(n'; m, eta)``; requires ``N >= M`` for exact row sums."""
    m = np.arange(M)[:, None]
    n = np.arange(N)[None, :]
    return stats.binom.pmf(n, m, eta)


def total_variation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row total-variation distance."""
    return 0.5 * np.abs(np.asarray(a) - np.asarray(b)).sum(axis=-1)


# --- I/O -----------------------------------------------------------------------------


def write_povm(path, povm: np.ndarray) -> None:
    """Header ``M, N`` as little-endian u64, then row-major little-endian f64."""
    povm = np.ascontiguousarray(povm, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_POVM_HEADER.pack(*povm.shape))
        fh.write(povm.tobytes())


def read_povm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_POVM_HEADER.size)
        if len(head) != _POVM_HEADER.size:
            raise ValueError(f"{path}: truncated POVM header")
        M, N = _POVM_HEADER.unpack(head)
        body = fh.read()
    if len(body) != 8 * M * N:
        raise ValueError(f"{path}: expected {8 * M * N} data bytes for {M}x{N}, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(M, N).copy()
