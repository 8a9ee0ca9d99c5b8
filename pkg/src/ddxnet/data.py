"""Labeled multichannel time-series records: I/O, windowing, normalization, batching.

Binary record file (``.ddx``, little-endian)::

    b"DDX1" | u32 version=1 | u32 num_records | u32 channels | u32 num_classes
    | u8 label_arity (1 = class index, 2 = multi-label)
    per record: u32 id_len | id (UTF-8) | u32 T
                | label (u32 class, or num_classes bytes of 0/1)
                | C*T float32 samples, channel-major
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (BatchingError, FormatError, LengthError, ParseError, SchemaError,
                     SplitError)

log = logging.getLogger(__name__)

MAGIC = b"DDX1"
VERSION = 1
STD_FLOOR = 1e-8


@dataclass
class SeriesRecord:
    samples: np.ndarray  # (C, T) float32
    label: object  # int class index, or (num_classes,) uint8 vector
    record_id: str

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)


@dataclass
class Dataset:
    records: list
    num_classes: int
    multi_label: bool = False
    norm: NormStats | None = None

    def __post_init__(self):
        if self.records:
            c = self.records[0].channels
            for r in self.records:
                if r.samples.ndim != 2 or r.channels != c:
                    raise SchemaError(
                        f"record {r.record_id!r} has {r.samples.shape[0]} channels, expected {c}"
                    )
                if r.length < 1:
                    raise SchemaError(f"record {r.record_id!r} is empty")
                if not np.isfinite(r.samples).all():
                    raise SchemaError(f"record {r.record_id!r} has non-finite samples")
                _check_label(r.label, self.num_classes, self.multi_label, r.record_id)

    def __len__(self):
        return len(self.records)

    @property
    def channels(self) -> int:
        return self.records[0].channels if self.records else 0

    def labels(self) -> np.ndarray:
        if self.multi_label:
            return np.stack([np.asarray(r.label, dtype=np.uint8) for r in self.records])
        return np.array([int(r.label) for r in self.records], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return replace(self, records=[self.records[i] for i in indices])


def _check_label(label, num_classes, multi_label, rid):
    if multi_label:
        arr = np.asarray(label)
        if arr.shape != (num_classes,) or not np.isin(arr, (0, 1)).all():
            raise SchemaError(f"record {rid!r}: multi-label target must be {num_classes} bits")
    else:
        if not (0 <= int(label) < num_classes):
            raise SchemaError(f"record {rid!r}: label {label} outside [0, {num_classes})")


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Exact equality of records (bitwise samples), labels, and ids."""
    if (a.num_classes, a.multi_label, len(a)) != (b.num_classes, b.multi_label, len(b)):
        return False
    for ra, rb in zip(a.records, b.records):
        if ra.record_id != rb.record_id or ra.samples.shape != rb.samples.shape:
            return False
        if ra.samples.tobytes() != rb.samples.tobytes():
            return False
        if not np.array_equal(np.asarray(ra.label), np.asarray(rb.label)):
            return False
    return True


# -- binary format --------------------------------------------------------------------------


def write_binary(dataset: Dataset, path) -> None:
    arity = 2 if dataset.multi_label else 1
    parts = [MAGIC, struct.pack("<IIIIB", VERSION, len(dataset), dataset.channels,
                                dataset.num_classes, arity)]
    for r in dataset.records:
        rid = r.record_id.encode("utf-8")
        parts.append(struct.pack("<I", len(rid)))
        parts.append(rid)
        parts.append(struct.pack("<I", r.length))
        if dataset.multi_label:
            parts.append(np.asarray(r.label, dtype=np.uint8).tobytes())
        else:
            parts.append(struct.pack("<I", int(r.label)))
        parts.append(np.ascontiguousarray(r.samples, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise LengthError(
                f"file truncated reading {what}: need {n} bytes at offset {self.pos}, "
                f"{len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_binary(path) -> Dataset:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, n, channels, num_classes, arity = rd.unpack("<IIIIB", "header")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if arity not in (1, 2):
        raise FormatError(f"{path}: label arity {arity} is not 1 or 2")
    multi = arity == 2
    records = []
    for i in range(n):
        (id_len,) = rd.unpack("<I", f"record {i} id length")
        rid = rd.take(id_len, f"record {i} id").decode("utf-8")
        (t,) = rd.unpack("<I", f"record {i} length")
        if multi:
            label = np.frombuffer(rd.take(num_classes, f"record {i} label"), dtype=np.uint8).copy()
        else:
            (label,) = rd.unpack("<I", f"record {i} label")
        raw = rd.take(4 * channels * t, f"record {i} samples")
        samples = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(channels, t)
        records.append(SeriesRecord(samples, label, rid))
    if rd.pos != len(rd.buf):
        raise FormatError(f"{path}: {len(rd.buf) - rd.pos} trailing bytes after last record")
    return Dataset(records, num_classes, multi)


# -- CSV -----------------------------------------------------------------------------------------


@dataclass
class CsvSchema:
    """Column layout for :func:`load_csv`.

    ``layout="long"``: one row per time step; columns ``id_column``, ``label_column``
    and ``ch0 .. ch{C-1}``; consecutive rows with the same id form a record.
    ``layout="wide"``: one row per record; columns ``id_column``, ``label_column``
    and then C*T sample values, channel-major.
    Multi-label targets are written as 0/1 digits joined by ``;``.
    """

    channels: int
    label_column: str = "label"
    id_column: str = "record_id"
    layout: str = "long"
    num_classes: int | None = None
    multi_label: bool = False


def _parse_label(text, schema, line):
    try:
        if schema.multi_label:
            bits = [int(b) for b in text.split(";")]
            if any(b not in (0, 1) for b in bits):
                raise ValueError
            return np.array(bits, dtype=np.uint8)
        return int(text)
    except ValueError:
        raise ParseError(f"bad label {text!r}", line) from None


def _parse_float(text, line, column):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r} in column {column!r}", line) from None


def load_csv(path, schema: CsvSchema) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        rows = list(reader)
    for col in (schema.id_column, schema.label_column):
        if col not in header:
            raise SchemaError(f"missing column {col!r}")
    id_idx = header.index(schema.id_column)
    label_idx = header.index(schema.label_column)
    value_idx = [i for i in range(len(header)) if i not in (id_idx, label_idx)]
    records = []
    if schema.layout == "long":
        if len(value_idx) != schema.channels:
            raise SchemaError(
                f"expected {schema.channels} channel columns, header has {len(value_idx)}"
            )
        current_id, label, steps = None, None, []

        def flush():
            if current_id is not None:
                records.append(SeriesRecord(np.array(steps, dtype=np.float32).T.copy(), label,
                                            current_id))

        for lineno, row in enumerate(rows, start=2):
            if len(row) != len(header):
                raise SchemaError(f"line {lineno}: {len(row)} fields, expected {len(header)}")
            rid = row[id_idx]
            if rid != current_id:
                flush()
                current_id, label, steps = rid, _parse_label(row[label_idx], schema, lineno), []
            steps.append([_parse_float(row[i], lineno, header[i]) for i in value_idx])
        flush()
    elif schema.layout == "wide":
        for lineno, row in enumerate(rows, start=2):
            values = [row[i] for i in range(len(row)) if i not in (id_idx, label_idx)]
            if len(values) % schema.channels:
                raise SchemaError(
                    f"line {lineno}: {len(values)} values is not a multiple of {schema.channels} channels"
                )
            nums = [_parse_float(v, lineno, f"value{j}") for j, v in enumerate(values)]
            samples = np.array(nums, dtype=np.float32).reshape(schema.channels, -1)
            records.append(SeriesRecord(samples, _parse_label(row[label_idx], schema, lineno),
                                        row[id_idx]))
    else:
        raise SchemaError(f"unknown CSV layout {schema.layout!r}")
    ids = [r.record_id for r in records]
    if len(set(ids)) != len(ids):
        raise SchemaError("record ids repeat; long-format rows of one record must be contiguous")
    num_classes = schema.num_classes
    if num_classes is None:
        if schema.multi_label:
            num_classes = len(records[0].label) if records else 0
        else:
            num_classes = max((int(r.label) for r in records), default=0) + 1
    return Dataset(records, num_classes, schema.multi_label)


def write_csv(dataset: Dataset, path, layout: str = "long") -> CsvSchema:
    """Write ``dataset`` as CSV; returns the schema that reads it back."""
    c = dataset.channels

    def fmt_label(label):
        if dataset.multi_label:
            return ";".join(str(int(b)) for b in label)
        return str(int(label))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if layout == "long":
            w.writerow(["record_id", "label"] + [f"ch{i}" for i in range(c)])
            for r in dataset.records:
                lab = fmt_label(r.label)
                for t in range(r.length):
                    w.writerow([r.record_id, lab] + [repr(float(v)) for v in r.samples[:, t]])
        else:
            width = max(r.samples.size for r in dataset.records)
            w.writerow(["record_id", "label"] + [f"v{i}" for i in range(width)])
            for r in dataset.records:
                w.writerow([r.record_id, fmt_label(r.label)]
                           + [repr(float(v)) for v in r.samples.reshape(-1)])
    return CsvSchema(channels=c, layout=layout, num_classes=dataset.num_classes,
                     multi_label=dataset.multi_label)


# -- windowing / normalization ----------------------------------------------------------------


def window_segments(record: SeriesRecord, window_len: int, stride: int):
    """Cut ``record`` into fixed-length windows at offsets 0, stride, 2*stride, ...

    Returns ``(segments, dropped)`` where ``dropped`` is 1 if the record was shorter
    than ``window_len`` (and so produced no segments), else 0.  Tail samples that do
    not fill a window are discarded.
    """
    if window_len < 1 or stride < 1:
        raise ValueError("window_len and stride must be positive")
    t = record.length
    if window_len > t:
        return [], 1
    segs = []
    for off in range(0, t - window_len + 1, stride):
        segs.append(SeriesRecord(record.samples[:, off : off + window_len].copy(), record.label,
                                 f"{record.record_id}@{off}"))
    return segs, 0


def window_dataset(dataset: Dataset, window_len: int, stride: int | None = None):
    stride = stride or window_len
    out, dropped = [], 0
    for r in dataset.records:
        segs, d = window_segments(r, window_len, stride)
        out.extend(segs)
        dropped += d
    if dropped:
        log.warning("%d records shorter than window_len=%d were dropped", dropped, window_len)
    return replace(dataset, records=out), dropped


def fit_norm(dataset: Dataset) -> NormStats:
    if not dataset.records:
        raise ValueError("cannot fit normalization on an empty dataset")
    c = dataset.channels
    count = 0
    total = np.zeros(c)
    for r in dataset.records:
        total += r.samples.sum(axis=1, dtype=np.float64)
        count += r.length
    mean = total / count
    sq = np.zeros(c)
    for r in dataset.records:
        d = r.samples.astype(np.float64) - mean[:, None]
        sq += (d * d).sum(axis=1)
    return NormStats(mean, np.sqrt(sq / count))


def apply_norm(dataset: Dataset, stats: NormStats) -> Dataset:
    recs = [
        SeriesRecord(((r.samples - stats.mean[:, None]) / stats.std[:, None]).astype(np.float32),
                     r.label, r.record_id)
        for r in dataset.records
    ]
    return replace(dataset, records=recs, norm=stats)


# -- synthetic tasks -------------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int
    channels: int
    length: int
    num_records: int
    motif_length: int = 64
    noise_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.channels < 1 or self.length < 1 or self.num_records < 1:
            raise ValueError("channels, length and num_records must be positive")
        if not (1 <= self.motif_length <= self.length):
            raise ValueError("motif_length must lie in [1, length]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def class_motifs(spec: SynthSpec) -> np.ndarray:
    """One Hann-windowed sinusoid per class, (num_classes, motif_length).

    Class c oscillates at ``1.5 + 1.5*c`` cycles per motif with a seed-derived
    phase, so classes differ in frequency.
    """
    rng = np.random.default_rng([spec.seed, 0])
    phases = rng.uniform(0, 2 * np.pi, spec.num_classes)
    L = spec.motif_length
    u = (np.arange(L) + 0.5) / L
    window = np.sin(np.pi * u) ** 2
    cycles = 1.5 + 1.5 * np.arange(spec.num_classes)
    return window[None, :] * np.sin(2 * np.pi * cycles[:, None] * u[None, :] + phases[:, None])


def synth_generate(spec: SynthSpec) -> Dataset:
    """Noise plus a class motif at a random offset on a random subset of channels.

    Labels cycle 0, 1, ..., K-1, 0, ... so class counts differ by at most one.
    """
    motifs = class_motifs(spec)
    rng = np.random.default_rng([spec.seed, 1])
    records = []
    width = len(str(spec.num_records - 1))
    for i in range(spec.num_records):
        c = i % spec.num_classes
        x = rng.standard_normal((spec.channels, spec.length)) * spec.noise_std
        offset = int(rng.integers(0, spec.length - spec.motif_length + 1))
        n_active = int(rng.integers(1, spec.channels + 1))
        active = rng.choice(spec.channels, size=n_active, replace=False)
        x[np.sort(active), offset : offset + spec.motif_length] += motifs[c]
        records.append(SeriesRecord(x.astype(np.float32), c, f"synth{i:0{width}d}"))
    return Dataset(records, spec.num_classes)


# -- splitting / batching -------------------------------------------------------------------------


def stratified_split(dataset: Dataset, val_fraction: float, seed: int):
    """Per-class proportional train/val split, deterministic in ``seed``.

    Multi-label datasets are stratified on the first positive label (or "none").
    """
    if not (0 < val_fraction < 1):
        raise SplitError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if dataset.multi_label:
        keys = [int(np.argmax(r.label)) if np.any(r.label) else -1 for r in dataset.records]
    else:
        keys = [int(r.label) for r in dataset.records]
    by_class: dict[int, list[int]] = {}
    for i, k in enumerate(keys):
        by_class.setdefault(k, []).append(i)
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for cls in sorted(by_class):
        idx = by_class[cls]
        if len(idx) < 2:
            raise SplitError(f"class {cls} has {len(idx)} record(s); need at least 2 to split")
        perm = [idx[j] for j in rng.permutation(len(idx))]
        n_val = min(max(int(round(val_fraction * len(idx))), 1), len(idx) - 1)
        val_idx.extend(perm[:n_val])
        train_idx.extend(perm[n_val:])
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(val_idx))


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def stack(dataset: Dataset, indices=None):
    idx = range(len(dataset)) if indices is None else indices
    recs = [dataset.records[i] for i in idx]
    lengths = {r.length for r in recs}
    if len(lengths) > 1:
        raise BatchingError(f"records have ragged lengths {sorted(lengths)}; window them first")
    x = np.stack([r.samples for r in recs])
    if dataset.multi_label:
        y = np.stack([np.asarray(r.label, dtype=np.uint8) for r in recs])
    else:
        y = np.array([int(r.label) for r in recs], dtype=np.int64)
    return x, y


def batch_iter(dataset: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0,
               epoch: int = 0):
    """Yield ``(x (N, C, T) float32, labels)``; the last batch may be short."""
    if batch_size < 1:
        raise BatchingError("batch_size must be positive")
    lengths = {r.length for r in dataset.records}
    if len(lengths) > 1:
        raise BatchingError(f"records have ragged lengths {sorted(lengths)}; window them first")
    order = epoch_order(len(dataset), shuffle, seed, epoch)
    for start in range(0, len(order), batch_size):
        yield stack(dataset, order[start : start + batch_size])


def class_weights(labels, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights normalized so ``sum(w[c] * count[c]) == N``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    w = np.zeros(num_classes)
    present = counts > 0
    if not present.all():
        log.warning("classes %s absent; their weight is 0", np.flatnonzero(~present).tolist())
    w[present] = n / (num_classes * counts[present])
    total = float((w * counts).sum())
    if total > 0:
        w *= n / total
    return w
