"""Binary time-tag files and the simulator's ground-truth sidecar.

Tag file layout (little-endian)::

    header  28 bytes: magic b"PNRTAGS\\0", version u16 (=1), channel_count u16,
                      rep_period_ps u64, record_count u64
    records 16 bytes each: timestamp_ps u64, channel u8, event_type u8 (0 click,
                      1 trigger), 6 reserved zero bytes

Records are globally time-sorted. Fixed-size records let readers memory-map the
file and split it into independent chunks.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

TAG_MAGIC = b"PNRTAGS\x00"
TAG_VERSION = 1
HEADER = struct.Struct("<8sHHQQ")
HEADER_SIZE = HEADER.size
TAG_DTYPE = np.dtype(
    [("timestamp", "<u8"), ("channel", "u1"), ("event_type", "u1"), ("reserved", "u1", (6,))]
)
assert TAG_DTYPE.itemsize == 16

EVENT_CLICK = 0
EVENT_TRIGGER = 1


class TagFormatError(ValueError):
    """Malformed tag file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TagFileHeader:
    channel_count: int
    rep_period_ps: int
    record_count: int
    version: int = TAG_VERSION

    def pack(self) -> bytes:
        return HEADER.pack(TAG_MAGIC, self.version, self.channel_count, self.rep_period_ps, self.record_count)

    @classmethod
    def unpack(cls, raw: bytes) -> "TagFileHeader":
        if len(raw) < HEADER_SIZE:
            raise TagFormatError(f"truncated header: {len(raw)} of {HEADER_SIZE} bytes", len(raw))
        magic, version, channels, period, count = HEADER.unpack(raw[:HEADER_SIZE])
        if magic != TAG_MAGIC:
            raise TagFormatError(f"bad magic {magic!r}", 0)
        if version != TAG_VERSION:
            raise TagFormatError(f"unsupported version {version}", 8)
        return cls(channels, period, count, version)


def make_records(timestamps, channels, event_types=None) -> np.ndarray:
    ts = np.asarray(timestamps)
    if ts.size and (np.issubdtype(ts.dtype, np.signedinteger) and ts.min() < 0):
        raise ValueError("timestamps must be nonnegative")
    rec = np.zeros(ts.size, dtype=TAG_DTYPE)
    rec["timestamp"] = ts
    rec["channel"] = channels
    if event_types is None:
        rec["event_type"] = np.where(rec["channel"] == 0, EVENT_TRIGGER, EVENT_CLICK)
    else:
        rec["event_type"] = event_types
    return rec


def _first_inversion(ts: np.ndarray) -> int:
    bad = np.flatnonzero(ts[1:] < ts[:-1])
    return int(bad[0]) + 1 if bad.size else -1


def validate_records(rec: np.ndarray, channel_count: int, base_offset: int = HEADER_SIZE, prev_ts: int | None = None) -> None:
    ts = rec["timestamp"]
    if prev_ts is not None and ts.size and ts[0] < prev_ts:
        raise TagFormatError("records not time-sorted at chunk boundary", base_offset)
    i = _first_inversion(ts)
    if i >= 0:
        raise TagFormatError(
            f"records not time-sorted: record {i} ({ts[i]} ps) precedes record {i - 1} ({ts[i - 1]} ps)",
            base_offset + 16 * i,
        )
    bad = np.flatnonzero(rec["reserved"].any(axis=1))
    if bad.size:
        raise TagFormatError(f"nonzero reserved bytes in record {bad[0]}", base_offset + 16 * int(bad[0]) + 10)
    bad = np.flatnonzero(rec["channel"] >= channel_count)
    if bad.size:
        raise TagFormatError(f"channel {rec['channel'][bad[0]]} out of range in record {bad[0]}", base_offset + 16 * int(bad[0]) + 8)
    expected = np.where(rec["channel"] == 0, EVENT_TRIGGER, EVENT_CLICK)
    bad = np.flatnonzero(rec["event_type"] != expected)
    if bad.size:
        raise TagFormatError(f"event type does not match channel in record {bad[0]}", base_offset + 16 * int(bad[0]) + 9)


def write_tags(dest, records: np.ndarray, rep_period_ps: int, channel_count: int = 9) -> None:
    """Write a complete tag file to a path or binary stream."""
    records = np.asarray(records, dtype=TAG_DTYPE)
    validate_records(records, channel_count)
    header = TagFileHeader(channel_count, int(rep_period_ps), records.size)
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "wb") as fh:
            fh.write(header.pack())
            fh.write(records.tobytes())
    else:
        dest.write(header.pack())
        dest.write(records.tobytes())


def read_tags(src) -> tuple[TagFileHeader, np.ndarray]:
    """Read and validate a whole tag file from a path, bytes, or binary stream."""
    if isinstance(src, (str, os.PathLike)):
        raw = Path(src).read_bytes()
    elif isinstance(src, (bytes, bytearray, memoryview)):
        raw = bytes(src)
    else:
        raw = src.read()
    header = TagFileHeader.unpack(raw)
    body = len(raw) - HEADER_SIZE
    need = 16 * header.record_count
    if body < need:
        full = body // 16
        raise TagFormatError(
            f"truncated: header declares {header.record_count} records, file holds {full}",
            HEADER_SIZE + 16 * full,
        )
    if body > need:
        raise TagFormatError(f"{body - need} trailing bytes after {header.record_count} records", HEADER_SIZE + need)
    rec = np.frombuffer(raw, dtype=TAG_DTYPE, count=header.record_count, offset=HEADER_SIZE)
    validate_records(rec, header.channel_count)
    return header, rec


def open_tags(path) -> tuple[TagFileHeader, np.ndarray]:
    """Memory-map a tag file; checks size only. Use :func:`validate_records` per chunk."""
    with open(path, "rb") as fh:
        header = TagFileHeader.unpack(fh.read(HEADER_SIZE))
    size = os.path.getsize(path)
    need = HEADER_SIZE + 16 * header.record_count
    if size != need:
        full = (size - HEADER_SIZE) // 16
        raise TagFormatError(
            f"file size {size} does not match {header.record_count} declared records", HEADER_SIZE + 16 * min(full, header.record_count)
        )
    if header.record_count == 0:
        return header, np.zeros(0, dtype=TAG_DTYPE)
    rec = np.memmap(path, dtype=TAG_DTYPE, mode="r", offset=HEADER_SIZE, shape=(header.record_count,))
    return header, rec


class TagWriter:
    """Append-only writer; the record count is patched into the header on close.

    Data go to ``<path>.partial`` and are renamed into place only after a clean
    close, so an interrupted write never leaves a file that looks valid.
    """

    def __init__(self, path, rep_period_ps: int, channel_count: int = 9):
        self.path = Path(path)
        self.partial = self.path.with_name(self.path.name + ".partial")
        self.rep_period_ps = int(rep_period_ps)
        self.channel_count = channel_count
        self.count = 0
        self._last_ts = None
        self._fh: BinaryIO = open(self.partial, "wb")
        self._fh.write(TagFileHeader(channel_count, self.rep_period_ps, 0).pack())

    def append(self, records: np.ndarray) -> None:
        records = np.asarray(records, dtype=TAG_DTYPE)
        validate_records(records, self.channel_count, HEADER_SIZE + 16 * self.count, self._last_ts)
        self._fh.write(records.tobytes())
        self.count += records.size
        if records.size:
            self._last_ts = int(records["timestamp"][-1])

    def close(self) -> None:
        self._fh.seek(0)
        self._fh.write(TagFileHeader(self.channel_count, self.rep_period_ps, self.count).pack())
        self._fh.close()
        os.replace(self.partial, self.path)

    def abort(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()
        return False


# --- ground truth sidecar -----------------------------------------------------------

TRUTH_MAGIC = b"PNRTRUTH"
TRUTH_VERSION = 1
TRUTH_HEADER = struct.Struct("<8sIIQ")  # magic, version, n_bins, n_shots

FLAG_BLINDED = 1
FLAG_DARK = 2
FLAG_LOST = 4  # click fell outside its coincidence window


def truth_dtype(n_bins: int) -> np.dtype:
    """Per-shot record: shot_index u64, state_index u32, pad u32, incident_mean f64,
    absorbed u16[n_bins], detected u16[n_bins], rel_time_ps i32[n_bins] (-1 none),
    flags u8[n_bins]."""
    return np.dtype(
        [
            ("shot_index", "<u8"),
            ("state_index", "<u4"),
            ("pad", "<u4"),
            ("incident_mean", "<f8"),
            ("absorbed", "<u2", (n_bins,)),
            ("detected", "<u2", (n_bins,)),
            ("rel_time_ps", "<i4", (n_bins,)),
            ("flags", "u1", (n_bins,)),
        ]
    )


class TruthWriter:
    def __init__(self, path, n_bins: int):
        self.path = Path(path)
        self.partial = self.path.with_name(self.path.name + ".partial")
        self.n_bins = n_bins
        self.dtype = truth_dtype(n_bins)
        self.count = 0
        self._fh = open(self.partial, "wb")
        self._fh.write(TRUTH_HEADER.pack(TRUTH_MAGIC, TRUTH_VERSION, n_bins, 0))

    def append(self, records: np.ndarray) -> None:
        self._fh.write(np.asarray(records, dtype=self.dtype).tobytes())
        self.count += len(records)

    def close(self) -> None:
        self._fh.seek(0)
        self._fh.write(TRUTH_HEADER.pack(TRUTH_MAGIC, TRUTH_VERSION, self.n_bins, self.count))
        self._fh.close()
        os.replace(self.partial, self.path)

    def abort(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()
        return False


def read_truth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < TRUTH_HEADER.size:
        raise TagFormatError("truncated ground-truth header", len(raw))
    magic, version, n_bins, n_shots = TRUTH_HEADER.unpack(raw[: TRUTH_HEADER.size])
    if magic != TRUTH_MAGIC or version != TRUTH_VERSION:
        raise TagFormatError("not a ground-truth file", 0)
    dt = truth_dtype(n_bins)
    need = TRUTH_HEADER.size + dt.itemsize * n_shots
    if len(raw) != need:
        raise TagFormatError(f"ground-truth size mismatch for {n_shots} shots", min(len(raw), need))
    return np.frombuffer(raw, dtype=dt, count=n_shots, offset=TRUTH_HEADER.size)
