"""Multivariate time-series records: ingestion, windowing, splits, synthesis.

A record is one subject's (channels x time) float64 matrix plus an age label
and sampling interval. Two on-disk formats live here:

* CSV, header ``subject_id,age,tr,channel,t0,t1,...`` with one row per channel
  and all rows of a subject contiguous;
* TSDS, a binary container (magic ``TSDS``) that round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import lfilter

from .numerics import RngStream, require_finite

__all__ = [
    "AugmentSeed",
    "DataFormatError",
    "SplitPlan",
    "TimeSeriesRecord",
    "WindowSample",
    "augment_seed",
    "downsample",
    "gen_synthetic",
    "kfold_split",
    "load_csv",
    "load_tsds",
    "save_csv",
    "save_tsds",
    "slide_windows",
    "subject_split",
    "zscore",
]

TSDS_MAGIC = b"TSDS"
TSDS_VERSION = 1


class DataFormatError(ValueError):
    """A file does not conform to the CSV or TSDS dataset format."""


@dataclass
class TimeSeriesRecord:
    """One subject: (C x T) series, age in years, sampling interval in seconds."""

    subject_id: str
    age: float
    tr_seconds: float
    series: np.ndarray

    def __post_init__(self):
        self.series = np.ascontiguousarray(self.series, dtype=np.float64)
        if self.series.ndim != 2 or self.series.shape[0] < 1 or self.series.shape[1] < 1:
            raise ValueError(
                f"record {self.subject_id!r}: series must be a nonempty 2-D (C x T) "
                f"matrix, got shape {self.series.shape}")
        require_finite(f"record {self.subject_id!r} series", self.series)
        if not (np.isfinite(self.age) and self.age > 0):
            raise ValueError(f"record {self.subject_id!r}: age must be positive, got {self.age}")
        if not (np.isfinite(self.tr_seconds) and self.tr_seconds > 0):
            raise ValueError(f"record {self.subject_id!r}: tr must be positive, got {self.tr_seconds}")

    @property
    def channels(self) -> int:
        return self.series.shape[0]

    @property
    def length(self) -> int:
        return self.series.shape[1]


@dataclass
class WindowSample:
    """One training window: input block (L_in x C) and target block (L_out x C)."""

    subject_id: str
    origin: int
    input_block: np.ndarray
    target_block: np.ndarray


@dataclass
class AugmentSeed:
    """The final L_in time points of a record, the seed for appended forecasts."""

    subject_id: str
    tail_window: np.ndarray  # (L_in x C), time-major


@dataclass(frozen=True)
class SplitPlan:
    """Subject-level train/test partition; never splits one subject's windows."""

    train_subjects: frozenset[str]
    test_subjects: frozenset[str]

    def __post_init__(self):
        overlap = self.train_subjects & self.test_subjects
        if overlap:
            raise ValueError(f"split plan overlaps on subjects {sorted(overlap)[:5]}")


def zscore(record: TimeSeriesRecord) -> TimeSeriesRecord:
    """Standardize each channel to mean 0, population std 1."""
    series = record.series
    means = series.mean(axis=1, keepdims=True)
    stds = series.std(axis=1, keepdims=True)
    flat = np.where(stds[:, 0] == 0.0)[0]
    if flat.size:
        raise ValueError(
            f"record {record.subject_id!r}: channel {int(flat[0])} is constant, cannot z-score")
    return replace(record, series=(series - means) / stds)


def downsample(record: TimeSeriesRecord, factor: int) -> TimeSeriesRecord:
    """Strided decimation: keep every ``factor``-th sample starting at index 0."""
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if record.length < factor:
        raise ValueError(
            f"record {record.subject_id!r}: length {record.length} shorter than factor {factor}")
    return replace(record,
                   series=np.ascontiguousarray(record.series[:, ::factor]),
                   tr_seconds=record.tr_seconds * factor)


def slide_windows(record: TimeSeriesRecord, window: int = 24,
                  input_len: int = 20, stride: int = 1) -> list[WindowSample]:
    """Cut overlapping windows of ``window`` points, split input/target blocks.

    Windows start at 0, stride, 2*stride, ... while they fit; each yields a
    time-major (L_in x C) input and ((window - input_len) x C) target.
    """
    if not (1 <= input_len < window):
        raise ValueError(f"need 1 <= input_len < window, got {input_len} / {window}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    t = record.length
    if t < window:
        raise ValueError(
            f"record {record.subject_id!r}: series shorter than window ({t} < {window})")
    ts = record.series.T  # (T x C) view
    samples = []
    for origin in range(0, t - window + 1, stride):
        samples.append(WindowSample(
            subject_id=record.subject_id,
            origin=origin,
            input_block=ts[origin:origin + input_len].copy(),
            target_block=ts[origin + input_len:origin + window].copy(),
        ))
    return samples


def augment_seed(record: TimeSeriesRecord, input_len: int = 20) -> AugmentSeed:
    """The last ``input_len`` points of the series, time-major."""
    if record.length < input_len:
        raise ValueError(
            f"record {record.subject_id!r}: length {record.length} shorter than "
            f"input window {input_len}")
    return AugmentSeed(record.subject_id, record.series.T[-input_len:].copy())


def _subject_ids(records) -> list[str]:
    ids = sorted(r.subject_id for r in records)
    for a, b in zip(ids, ids[1:]):
        if a == b:
            raise ValueError(f"duplicate subject id {a!r}")
    return ids


def subject_split(records, train_fraction: float = 0.8, rng: RngStream | None = None) -> SplitPlan:
    """Subject-level split with |train| = round(train_fraction * N)."""
    ids = _subject_ids(records)
    n = len(ids)
    if n < 2:
        raise ValueError(f"need at least 2 subjects to split, got {n}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if rng is None:
        rng = RngStream(0, "subject-split")
    perm = rng.generator().permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    train = frozenset(ids[i] for i in perm[:n_train])
    test = frozenset(ids[i] for i in perm[n_train:])
    return SplitPlan(train, test)


def kfold_split(records, k: int = 10, rng: RngStream | None = None) -> list[SplitPlan]:
    """k disjoint covering folds, sizes differing by at most 1; fold i is test set i."""
    ids = _subject_ids(records)
    n = len(ids)
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    if n < k:
        raise ValueError(f"cannot make {k} folds from {n} subjects (N < k)")
    if rng is None:
        rng = RngStream(0, "kfold")
    perm = rng.generator().permutation(n)
    parts = np.array_split(perm, k)
    plans = []
    for i, part in enumerate(parts):
        test = frozenset(ids[j] for j in part)
        train = frozenset(ids[j] for p in parts[:i] + parts[i + 1:] for j in p)
        plans.append(SplitPlan(train, test))
    return plans


def gen_synthetic(n_subjects: int, channels: int, length: int,
                  rng: RngStream, tr_seconds: float = 2.94) -> list[TimeSeriesRecord]:
    """Synthetic age-coded dataset: AR(2) damped oscillators per channel.

    Ages are Normal(59.17, 4.87) clipped to [40, 80]. Each channel follows an
    AR(2) process whose oscillation frequency rises and damping falls
    monotonically with age (plus per-channel jitter), so age is recoverable
    from the dynamics. Channels are emitted z-scored, which makes downstream
    augmentation append-only in model space. This is a benchmark fixture, not
    a claim of physiological realism.
    """
    if n_subjects < 1 or channels < 1:
        raise ValueError(f"need n_subjects >= 1 and channels >= 1, got {n_subjects}/{channels}")
    if length < 25:
        raise ValueError(f"length must be >= 25, got {length}")
    gen = rng.generator()
    ages = np.clip(gen.normal(59.17, 4.87, size=n_subjects), 40.0, 80.0)
    burn = 100
    records = []
    for s in range(n_subjects):
        u = (ages[s] - 40.0) / 40.0  # [0, 1] across the age range
        series = np.empty((channels, length))
        for c in range(channels):
            omega = np.clip((0.2 + 0.7 * u) * (1.0 + 0.06 * gen.standard_normal()), 0.05, 1.2)
            damp = np.clip((0.92 - 0.10 * u) + 0.02 * gen.standard_normal(), 0.5, 0.98)
            phi1 = 2.0 * damp * np.cos(omega)
            phi2 = -damp * damp
            noise = gen.standard_normal(burn + length)
            x = lfilter([1.0], [1.0, -phi1, -phi2], noise)[burn:]
            series[c] = (x - x.mean()) / x.std()
        records.append(TimeSeriesRecord(
            subject_id=f"S{s:05d}", age=float(ages[s]),
            tr_seconds=tr_seconds, series=series))
    return records


# --- CSV format ------------------------------------------------------------

_CSV_FIXED = ("subject_id", "age", "tr", "channel")


def _parse_cell(value: str, line: int, column: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise DataFormatError(f"line {line}, column {column}: not a number: {value!r}") from None
    if not np.isfinite(x):
        raise DataFormatError(f"line {line}, column {column}: non-finite value {value!r}")
    return x


def load_csv(path) -> list[TimeSeriesRecord]:
    """Load records from CSV; one row per channel, subjects contiguous."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("line 1: empty file") from None
        if tuple(header[:4]) != _CSV_FIXED:
            raise DataFormatError(
                f"line 1: header must start with {','.join(_CSV_FIXED)}, got {header[:4]}")
        time_cols = header[4:]
        expected_t = [f"t{i}" for i in range(len(time_cols))]
        if not time_cols or time_cols != expected_t:
            raise DataFormatError("line 1: time columns must be t0,t1,... in order")
        t_len = len(time_cols)

        records: list[TimeSeriesRecord] = []
        seen: set[str] = set()
        current_id: str | None = None
        current_rows: list[tuple[int, float, float, int, np.ndarray]] = []

        def finalize():
            nonlocal current_rows
            if current_id is None:
                return
            first_line, age, tr, _, _ = current_rows[0]
            for line, row_age, row_tr, chan, _ in current_rows:
                if row_age != age or row_tr != tr:
                    raise DataFormatError(
                        f"line {line}: subject {current_id!r} has inconsistent age/tr")
            chans = [chan for _, _, _, chan, _ in current_rows]
            if chans != list(range(len(chans))):
                raise DataFormatError(
                    f"line {first_line}: subject {current_id!r} channels must be "
                    f"0..{len(chans) - 1} in order, got {chans}")
            series = np.vstack([vals for _, _, _, _, vals in current_rows])
            records.append(TimeSeriesRecord(current_id, age, tr, series))
            current_rows = []

        for line_no, row in enumerate(reader, start=2):
            if len(row) != 4 + t_len:
                raise DataFormatError(
                    f"line {line_no}: expected {4 + t_len} cells, got {len(row)} (ragged row)")
            sid = row[0]
            if sid != current_id:
                finalize()
                if sid in seen:
                    raise DataFormatError(
                        f"line {line_no}: duplicate subject id {sid!r} (rows not contiguous)")
                seen.add(sid)
                current_id = sid
            age = _parse_cell(row[1], line_no, "age")
            tr = _parse_cell(row[2], line_no, "tr")
            try:
                chan = int(row[3])
            except ValueError:
                raise DataFormatError(
                    f"line {line_no}, column channel: not an integer: {row[3]!r}") from None
            vals = np.array([_parse_cell(row[4 + i], line_no, f"t{i}") for i in range(t_len)])
            current_rows.append((line_no, age, tr, chan, vals))
        finalize()

    if not records:
        raise DataFormatError("file contains no data rows")
    c0 = records[0].channels
    for rec in records:
        if rec.channels != c0:
            raise DataFormatError(
                f"subject {rec.subject_id!r} has {rec.channels} channels, expected {c0}")
    return records


def save_csv(records, path) -> None:
    """Write records as CSV (floats via repr, so load_csv round-trips bit-exactly)."""
    if not records:
        raise ValueError("no records to save")
    t_len = records[0].length
    for rec in records:
        if rec.length != t_len:
            raise ValueError("CSV format requires a uniform series length across subjects")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_CSV_FIXED) + [f"t{i}" for i in range(t_len)])
        for rec in records:
            for chan in range(rec.channels):
                writer.writerow(
                    [rec.subject_id, repr(rec.age), repr(rec.tr_seconds), chan]
                    + [repr(float(v)) for v in rec.series[chan]])


# --- TSDS binary format ------------------------------------------------------


class _Cursor:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataFormatError(
                f"{self.what}: truncated file (needed {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DataFormatError(
                f"{self.what}: {len(self.data) - self.pos} trailing bytes after payload")


def save_tsds(records, path) -> None:
    """Write records to the TSDS binary container (bit-exact round trip)."""
    if not records:
        raise ValueError("no records to save")
    with open(path, "wb") as fh:
        fh.write(TSDS_MAGIC)
        fh.write(struct.pack("<II", TSDS_VERSION, len(records)))
        for rec in records:
            sid = rec.subject_id.encode("utf-8")
            fh.write(struct.pack("<I", len(sid)))
            fh.write(sid)
            fh.write(struct.pack("<dd", rec.age, rec.tr_seconds))
            fh.write(struct.pack("<II", rec.channels, rec.length))
            fh.write(np.ascontiguousarray(rec.series, dtype="<f8").tobytes())


def load_tsds(path) -> list[TimeSeriesRecord]:
    """Read a TSDS file, validating magic, version and exact length."""
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), what=str(path))
    if cur.take(4) != TSDS_MAGIC:
        raise DataFormatError(f"{cur.what}: bad magic, not a TSDS file")
    version = cur.u32()
    if version != TSDS_VERSION:
        raise DataFormatError(f"{cur.what}: unsupported TSDS version {version}")
    count = cur.u32()
    records = []
    for _ in range(count):
        sid = cur.take(cur.u32()).decode("utf-8")
        age = cur.f64()
        tr = cur.f64()
        c = cur.u32()
        t = cur.u32()
        raw = cur.take(c * t * 8)
        series = np.frombuffer(raw, dtype="<f8").reshape(c, t).copy()
        records.append(TimeSeriesRecord(sid, age, tr, series))
    cur.done()
    if not records:
        raise DataFormatError(f"{cur.what}: file contains no subjects")
    return records
