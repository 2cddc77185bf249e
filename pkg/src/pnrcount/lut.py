"""Arrival-time to photon-number lookup tables under a flat prior."""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

from pnrcount.timing import BinTimingModel, emg_cdf

DEGENERATE_LOG_DENSITY = -700.0
COVERAGE = 0.999

LUT_MAGIC = b"PNRLUT\x00\x00"
BANK_MAGIC = b"PNRLUTBK"
BANK_VERSION = 1
_LUT_HEADER = struct.Struct("<8sddQQ")
_BANK_HEADER = struct.Struct("<8sIII")


class PhotonNumberDistribution:
    """Probabilities over photon number ``n = 0..support_max``."""

    __slots__ = ("probs",)

    def __init__(self, probs, *, check: bool = True):
        p = np.array(probs, dtype=float)
        if check:
            if p.ndim != 1 or p.size < 1:
                raise ValueError("distribution needs at least one entry")
            if np.any(p < 0) or not np.all(np.isfinite(p)):
                raise ValueError("probabilities must be finite and nonnegative")
            if abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p.flags.writeable = False
        self.probs = p

    @classmethod
    def vacuum(cls) -> "PhotonNumberDistribution":
        # immutable, so one shared instance serves every empty bin
        if cls is PhotonNumberDistribution:
            return _VACUUM
        return cls([1.0])

    @property
    def support_max(self) -> int:
        return self.probs.size - 1

    @property
    def mean(self) -> float:
        return float(np.arange(self.probs.size) @ self.probs)

    @property
    def variance(self) -> float:
        n = np.arange(self.probs.size)
        m = n @ self.probs
        return float(((n - m) ** 2) @ self.probs)

    def __len__(self):
        return self.probs.size

    def __array__(self, dtype=None, copy=None):
        return self.probs if dtype is None else self.probs.astype(dtype)

    def __repr__(self):
        return f"PhotonNumberDistribution({np.array2string(self.probs, precision=4, threshold=8)})"


_VACUUM = PhotonNumberDistribution([1.0])


class LutCoverageError(ValueError):
    def __init__(self, uncovered: list[tuple[int, float]]):
        detail = ", ".join(f"n={n} ({100 * m:.3f}% inside)" for n, m in uncovered)
        super().__init__(f"LUT grid does not cover components: {detail}")
        self.uncovered = uncovered


class Lut:
    """Posterior ``p(n | t)`` on a uniform time grid; row ``k`` is time ``origin + k * step``.

    ``rows`` has shape ``(grid_len, n_cap + 1)`` with column 0 (vacuum) zero for every
    click row. The table is read-only; ``out_of_range`` counts lookups clamped to an edge.
    """

    def __init__(self, grid_origin: float, grid_step: float, rows: np.ndarray, degenerate: np.ndarray | None = None):
        rows = np.array(rows, dtype=float)
        if not grid_step > 0:
            raise ValueError("grid step must be positive")
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 2:
            raise ValueError("LUT rows must be a (grid_len, n_cap + 1) array")
        if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("every LUT row must be a normalized distribution")
        rows.flags.writeable = False
        self.grid_origin = float(grid_origin)
        self.grid_step = float(grid_step)
        self.rows = rows
        self.degenerate = (
            np.zeros(rows.shape[0], dtype=bool) if degenerate is None else np.asarray(degenerate, dtype=bool)
        )
        n = np.arange(rows.shape[1])
        self.row_mean = rows @ n
        self.row_var = np.maximum(rows @ (n * n) - self.row_mean**2, 0.0)
        self.out_of_range = 0

    @property
    def n_cap(self) -> int:
        return self.rows.shape[1] - 1

    @property
    def grid_len(self) -> int:
        return self.rows.shape[0]

    @property
    def grid(self) -> np.ndarray:
        return self.grid_origin + self.grid_step * np.arange(self.grid_len)

    @property
    def vacuum_row(self) -> PhotonNumberDistribution:
        return PhotonNumberDistribution.vacuum()

    def row_index(self, t) -> tuple[np.ndarray, int]:
        """Nearest grid rows for times ``t`` and how many were clamped."""
        k = np.rint((np.asarray(t, dtype=float) - self.grid_origin) / self.grid_step)
        outside = int(np.count_nonzero((k < 0) | (k > self.grid_len - 1)))
        return np.clip(k, 0, self.grid_len - 1).astype(np.intp), outside

    def same_grid(self, other: "Lut") -> bool:
        return (
            self.grid_origin == other.grid_origin
            and self.grid_step == other.grid_step
            and self.rows.shape == other.rows.shape
        )

    def summary(self) -> str:
        lo, hi = self.grid[0], self.grid[-1]
        argmax = self.rows.argmax(axis=1)
        lines = [
            f"grid {lo:g}..{hi:g} ps step {self.grid_step:g} ps ({self.grid_len} rows), n_cap {self.n_cap}",
            f"degenerate rows: {int(self.degenerate.sum())}",
            "most probable n by time range:",
        ]
        start = 0
        for k in range(1, self.grid_len + 1):
            if k == self.grid_len or argmax[k] != argmax[start]:
                lines.append(f"  {self.grid[start]:8.1f} .. {self.grid[k - 1]:8.1f} ps  n={argmax[start]}")
                start = k
        return "\n".join(lines)


def build_lut(
    model: BinTimingModel,
    grid_origin: float = 0.0,
    grid_step: float = 1.0,
    grid_len: int = 1500,
    prior: Sequence[float] | None = None,
) -> Lut:
    """Tabulate ``p(n|t) = w_n pdf_n(t) / sum_m w_m pdf_m(t)`` with a flat ``w`` by default.

    Rows whose largest log-density is below -700 are flagged degenerate and copy
    the nearest regular row.
    """
    if grid_len < 1 or not grid_step > 0:
        raise ValueError("grid needs grid_len >= 1 and positive step")
    t = grid_origin + grid_step * np.arange(grid_len)
    lo, hi = t[0], t[-1]
    uncovered = []
    for c in model.components:
        mass = emg_cdf(hi, c.params) - emg_cdf(lo, c.params)
        if mass < COVERAGE:
            uncovered.append((c.n, float(mass)))
    if uncovered:
        raise LutCoverageError(uncovered)

    logp = model.component_logpdf(t)  # (n_cap, grid_len)
    if prior is not None:
        w = np.asarray(prior, dtype=float)
        if w.shape != (model.n_cap,) or np.any(w <= 0):
            raise ValueError("prior must be strictly positive with one weight per photon number")
        logp = logp + np.log(w)[:, None]
    top = logp.max(axis=0)
    post = np.exp(logp - top)
    post /= post.sum(axis=0)
    degenerate = top < DEGENERATE_LOG_DENSITY
    if degenerate.all():
        raise ValueError("every LUT row underflows; grid does not overlap the model")
    if degenerate.any():
        good = np.flatnonzero(~degenerate)
        bad = np.flatnonzero(degenerate)
        pos = np.searchsorted(good, bad).clip(1, good.size - 1) if good.size > 1 else np.zeros_like(bad)
        left = good[np.maximum(pos - 1, 0)]
        right = good[pos]
        nearest = np.where(np.abs(bad - left) <= np.abs(right - bad), left, right)
        post[:, bad] = post[:, nearest]
    rows = np.zeros((grid_len, model.n_cap + 1))
    rows[:, 1:] = post.T
    return Lut(grid_origin, grid_step, rows, degenerate)


def lookup(lut: Lut, event: float | None) -> PhotonNumberDistribution:
    """Posterior for one event; ``None`` means no click (vacuum)."""
    if event is None:
        return PhotonNumberDistribution.vacuum()
    k, outside = lut.row_index(event)
    lut.out_of_range += outside
    return PhotonNumberDistribution(lut.rows[int(k)], check=False)


class LutBank:
    """One LUT per detection bin, stored once per distinct table."""

    def __init__(self, tables: Sequence[Lut], index: Sequence[int]):
        self.tables = list(tables)
        self.index = np.asarray(index, dtype=np.intp)
        if self.index.ndim != 1 or np.any(self.index < 0) or np.any(self.index >= len(self.tables)):
            raise ValueError("LUT bank index refers to missing tables")

    @classmethod
    def from_models(cls, models: Sequence[BinTimingModel], **grid) -> "LutBank":
        from pnrcount.detector import unique_models

        uniq, index = unique_models(models)
        return cls([build_lut(m, **grid) for m in uniq], index)

    @classmethod
    def uniform(cls, lut: Lut, n_bins: int) -> "LutBank":
        return cls([lut], np.zeros(n_bins, dtype=np.intp))

    def __len__(self):
        return self.index.size

    def __getitem__(self, bin_index: int) -> Lut:
        return self.tables[self.index[bin_index]]

    @property
    def n_cap(self) -> int:
        return max(t.n_cap for t in self.tables)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, len(self.tables), self.index.size))
            fh.write(self.index.astype("<u4").tobytes())
            for t in self.tables:
                write_lut(fh, t)

    @classmethod
    def load(cls, path) -> "LutBank":
        with open(path, "rb") as fh:
            head = fh.read(_BANK_HEADER.size)
            if len(head) < _BANK_HEADER.size:
                raise ValueError(f"{path}: truncated LUT bank header")
            magic, version, n_tables, n_bins = _BANK_HEADER.unpack(head)
            if magic != BANK_MAGIC or version != BANK_VERSION:
                raise ValueError(f"{path}: not a LUT bank file (v{BANK_VERSION})")
            raw = fh.read(4 * n_bins)
            if len(raw) != 4 * n_bins:
                raise ValueError(f"{path}: truncated LUT bank index")
            index = np.frombuffer(raw, dtype="<u4").astype(np.intp)
            tables = [read_lut(fh) for _ in range(n_tables)]
        return cls(tables, index)


def write_lut(fh: BinaryIO, lut: Lut) -> None:
    """Header (magic, origin f64, step f64, len u64, n_cap u64) then row-major f64 rows."""
    fh.write(_LUT_HEADER.pack(LUT_MAGIC, lut.grid_origin, lut.grid_step, lut.grid_len, lut.n_cap))
    fh.write(np.ascontiguousarray(lut.rows, dtype="<f8").tobytes())


def read_lut(fh: BinaryIO) -> Lut:
    start = fh.tell() if fh.seekable() else 0
    head = fh.read(_LUT_HEADER.size)
    if len(head) < _LUT_HEADER.size:
        raise ValueError(f"truncated LUT header at byte {start}")
    magic, origin, step, length, n_cap = _LUT_HEADER.unpack(head)
    if magic != LUT_MAGIC:
        raise ValueError(f"bad LUT magic at byte {start}")
    nbytes = 8 * length * (n_cap + 1)
    body = fh.read(nbytes)
    if len(body) != nbytes:
        raise ValueError(f"truncated LUT body at byte {start + _LUT_HEADER.size + len(body)}")
    rows = np.frombuffer(body, dtype="<f8").reshape(length, n_cap + 1)
    return Lut(origin, step, rows)


def save_lut(path, lut: Lut) -> None:
    with open(path, "wb") as fh:
        write_lut(fh, lut)


def load_lut(path) -> Lut:
    with open(path, "rb") as fh:
        return read_lut(fh)
