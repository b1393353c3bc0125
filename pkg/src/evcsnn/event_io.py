"""Event-camera data handling: parsing, slicing, sampling, splitting and binning.

Events are stored as numpy structured arrays with the fields ``t`` (µs),
``x``, ``y`` and ``p`` (polarity, 0 or 1). An :class:`EventBatch` is a labelled,
fixed-duration slice of a recording whose timestamps start at zero.
"""

from __future__ import annotations

import io
import math
import struct
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, TextIO

import numpy as np

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])


class EventParseError(ValueError):
    """A CSV line could not be read as an event."""

    def __init__(self, message: str, line: int, source: str | None = None):
        where = f"{source}:{line}" if source else f"line {line}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.source = source


class EventRangeError(ValueError):
    """An event lies outside the sensor or has an invalid polarity."""


class DatasetFormatError(ValueError):
    """A dataset file is truncated, corrupt, or of an unknown version."""


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class SensorGeometry:
    width: int = 240
    height: int = 180

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"sensor extents must be positive, got {self.width}x{self.height}")


class EncodingMode(str, Enum):
    MERGED = "merged"  # one channel, polarity ignored
    POLARITY_SPLIT = "polarity"  # channel index = polarity

    @property
    def channels(self) -> int:
        return 1 if self is EncodingMode.MERGED else 2


def make_events(events: Iterable[tuple[int, int, int, int]]) -> np.ndarray:
    """Build an event array from ``(t, x, y, p)`` tuples."""
    return np.array([tuple(e) for e in events], dtype=EVENT_DTYPE)


@dataclass(eq=False)
class EventBatch:
    label: int
    subject: int
    duration: int
    events: np.ndarray

    def __post_init__(self) -> None:
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)
        if self.duration <= 0:
            raise ValueError(f"duration must be positive, got {self.duration}")

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        for e in self.events:
            yield Event(int(e["t"]), int(e["x"]), int(e["y"]), int(e["p"]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventBatch):
            return NotImplemented
        return (
            (self.label, self.subject, self.duration) == (other.label, other.subject, other.duration)
            and np.array_equal(self.events, other.events)
        )

    def validate(self, geometry: SensorGeometry | None = None) -> None:
        """Raise if the batch breaks its ordering, timing or range invariants."""
        ev = self.events
        if len(ev) and np.any(np.diff(ev["t"].astype(np.int64)) < 0):
            raise ValueError("events are not sorted by timestamp")
        if len(ev) and ev["t"].max() >= self.duration:
            raise ValueError("event timestamp beyond batch duration")
        if geometry is not None:
            check_ranges(ev, geometry)


def check_ranges(events: np.ndarray, geometry: SensorGeometry) -> None:
    if len(events) == 0:
        return
    if events["x"].max() >= geometry.width or events["y"].max() >= geometry.height:
        bad = events[(events["x"] >= geometry.width) | (events["y"] >= geometry.height)][0]
        raise EventRangeError(
            f"event at x={bad['x']}, y={bad['y']} outside {geometry.width}x{geometry.height} sensor"
        )
    if events["p"].max() > 1:
        raise EventRangeError("polarity must be 0 or 1")


# -- CSV -------------------------------------------------------------------------


def parse_event_csv(
    text: str | TextIO, geometry: SensorGeometry = SensorGeometry(), source: str | None = None
) -> np.ndarray:
    """Read ``timestamp,x,y,polarity`` lines into an event array.

    A first line whose leading field is not numeric is taken as a header and
    skipped. Blank lines are ignored; LF and CRLF endings are both accepted.
    """
    if isinstance(text, str):
        text = io.StringIO(text)
    rows = []
    for lineno, raw in enumerate(text, start=1):
        line = raw.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if lineno == 1 and not fields[0].lstrip("+-").isdigit():
            continue
        if len(fields) != 4:
            raise EventParseError(f"expected 4 fields, got {len(fields)}", lineno, source)
        try:
            t, x, y, p = (int(f) for f in fields)
        except ValueError:
            raise EventParseError(f"non-integer field in {line!r}", lineno, source) from None
        if t < 0 or x < 0 or y < 0:
            raise EventRangeError(f"{source or 'line'} {lineno}: negative value in {line!r}")
        if x >= geometry.width or y >= geometry.height:
            raise EventRangeError(
                f"{source or 'line'} {lineno}: ({x}, {y}) outside "
                f"{geometry.width}x{geometry.height} sensor"
            )
        if p not in (0, 1):
            raise EventRangeError(f"{source or 'line'} {lineno}: polarity {p} is not 0 or 1")
        rows.append((t, x, y, p))
    return np.array(rows, dtype=EVENT_DTYPE)


# -- batching ----------------------------------------------------------------------


def slice_into_batches(events: np.ndarray, window: int, label: int, subject: int) -> list[EventBatch]:
    """Cut a recording into consecutive windows ``[k*window, (k+1)*window)``.

    Timestamps are rebased to the window start. Windows without events are
    skipped, so a trailing partial window only appears when it holds events.
    """
    if window <= 0:
        raise ValueError(f"window must be positive, got {window}")
    events = np.asarray(events, dtype=EVENT_DTYPE)
    if len(events) == 0:
        return []
    t = events["t"]
    if np.any(t[1:] < t[:-1]):
        raise ValueError("events must be sorted by timestamp")
    index = t // np.uint64(window)
    batches = []
    for k in np.unique(index):
        chunk = events[index == k].copy()
        chunk["t"] -= np.uint64(k) * np.uint64(window)
        batches.append(EventBatch(label, subject, window, chunk))
    return batches


def sample_batches(batches: Sequence[EventBatch], k: int, rng: np.random.Generator) -> list[EventBatch]:
    """Pick ``k`` distinct batches uniformly at random."""
    if k < 0 or k > len(batches):
        raise ValueError(f"cannot sample {k} batches from {len(batches)}")
    picks = rng.choice(len(batches), size=k, replace=False)
    return [batches[i] for i in picks]


def split_train_val(
    dataset: Sequence[EventBatch], train_fraction: float, rng: np.random.Generator
) -> tuple[list[EventBatch], list[EventBatch]]:
    """Shuffle each class and send ``floor(fraction * n_class)`` of it to training.

    Classes are processed in ascending label order so that the result depends
    only on the data and the generator state.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(dataset) == 0:
        raise ValueError("cannot split an empty data set")
    by_class: dict[int, list[EventBatch]] = defaultdict(list)
    for b in dataset:
        by_class[b.label].append(b)
    train, val = [], []
    for label in sorted(by_class):
        members = by_class[label]
        order = rng.permutation(len(members))
        n_train = math.floor(train_fraction * len(members))
        train.extend(members[i] for i in order[:n_train])
        val.extend(members[i] for i in order[n_train:])
    return train, val


# -- binning -----------------------------------------------------------------------


def num_bins(duration: int, bin_window: int) -> int:
    return -(-duration // bin_window)


def bin_to_frames(
    batch: EventBatch,
    bin_window: int,
    mode: EncodingMode = EncodingMode.POLARITY_SPLIT,
    geometry: SensorGeometry = SensorGeometry(),
) -> np.ndarray:
    """Binary spike frames ``[T, C, H, W]`` with ``T = ceil(duration / bin_window)``.

    A cell is 1 when at least one event falls in it; counts saturate.
    """
    if bin_window <= 0:
        raise ValueError(f"bin_window must be positive, got {bin_window}")
    mode = EncodingMode(mode)
    frames = np.zeros(
        (num_bins(batch.duration, bin_window), mode.channels, geometry.height, geometry.width),
        dtype=np.uint8,
    )
    ev = batch.events
    if len(ev) == 0:
        return frames
    check_ranges(ev, geometry)
    t = (ev["t"] // np.uint64(bin_window)).astype(np.intp)
    keep = t < frames.shape[0]
    c = ev["p"].astype(np.intp) if mode is EncodingMode.POLARITY_SPLIT else np.zeros(len(ev), np.intp)
    frames[t[keep], c[keep], ev["y"][keep].astype(np.intp), ev["x"][keep].astype(np.intp)] = 1
    return frames


# -- synthetic data --------------------------------------------------------------


def _glyph(class_id: int, size: int = 5) -> np.ndarray:
    """A fixed blocky shape for ``class_id``.

    The bottom row spells the class index in binary, so classes below
    ``2**size`` never share a glyph.
    """
    rng = np.random.default_rng([0x5EED, class_id])
    g = rng.random((size, size)) < 0.5
    g[-1] = [(class_id >> i) & 1 for i in range(size)]
    g[0] |= ~g[0].any() & (np.arange(size) == class_id % size)
    return g


def generate_synthetic(
    class_id: int,
    geometry: SensorGeometry,
    duration: int,
    events_per_step: int,
    rng: np.random.Generator,
    num_classes: int = 24,
    step_us: int = 10_000,
    noise: float = 0.05,
    subject: int = 0,
) -> EventBatch:
    """Emit events from a class-specific silhouette swinging left and right.

    The silhouette is a blocky glyph unique to ``class_id``, placed at a
    class-dependent height. It moves horizontally along a sinusoid; every
    ``step_us`` microseconds ``events_per_step`` events are drawn from its
    current footprint, with polarity 1 while it moves right and 0 while it
    moves left. A fraction ``noise`` of events land on random pixels instead.
    """
    if not 0 <= class_id < num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {num_classes})")
    if duration <= 0:
        raise ValueError("duration must be positive")
    if events_per_step < 0 or step_us <= 0:
        raise ValueError("events_per_step must be >= 0 and step_us > 0")
    glyph = _glyph(class_id)
    cell = max(1, min(geometry.width, geometry.height) // 10)
    shape = np.kron(glyph, np.ones((cell, cell), dtype=bool))
    gh, gw = shape.shape
    if gh > geometry.height or gw > geometry.width:
        raise ValueError(f"sensor {geometry.width}x{geometry.height} too small for synthetic glyphs")
    rows, cols = np.nonzero(shape)
    top = (class_id * (geometry.height - gh)) // max(num_classes - 1, 1)
    travel = geometry.width - gw
    period = 1_000_000.0 * (1.0 + 0.05 * (class_id % 5))
    phase = rng.uniform(0, 2 * np.pi)

    chunks = []
    for start in range(0, duration, step_us):
        stop = min(start + step_us, duration)
        n = events_per_step
        if n == 0:
            continue
        mid = 0.5 * (start + stop)
        angle = 2 * np.pi * mid / period + phase
        left = int(round(0.5 * travel * (1 + np.sin(angle))))
        pol = 1 if np.cos(angle) >= 0 else 0
        pick = rng.integers(0, len(rows), size=n)
        ys = top + rows[pick]
        xs = left + cols[pick]
        ps = np.full(n, pol)
        is_noise = rng.random(n) < noise
        k = int(is_noise.sum())
        ys[is_noise] = rng.integers(0, geometry.height, size=k)
        xs[is_noise] = rng.integers(0, geometry.width, size=k)
        ps[is_noise] = rng.integers(0, 2, size=k)
        ts = rng.integers(start, stop, size=n)
        chunk = np.empty(n, dtype=EVENT_DTYPE)
        chunk["t"], chunk["x"], chunk["y"], chunk["p"] = ts, xs, ys, ps
        chunks.append(chunk)
    events = np.concatenate(chunks) if chunks else np.empty(0, dtype=EVENT_DTYPE)
    events = events[np.argsort(events["t"], kind="stable")]
    return EventBatch(class_id, subject, duration, events)


# -- dataset file ----------------------------------------------------------------

DATASET_MAGIC = b"EVDS"
DATASET_VERSION = 1
_RECORD_HEADER = struct.Struct("<HHQQ")  # label, subject, duration, count


def encode_dataset(batches: Sequence[EventBatch]) -> bytes:
    """Serialise batches.

    Layout (little-endian): ``"EVDS"``, u16 version, then per batch
    ``u16 label, u16 subject, u64 duration, u64 count`` followed by ``count``
    packed events ``u64 t, u16 x, u16 y, u8 p``.
    """
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<H", DATASET_VERSION))
    for b in batches:
        buf.write(_RECORD_HEADER.pack(b.label, b.subject, b.duration, len(b.events)))
        buf.write(np.ascontiguousarray(b.events, dtype=EVENT_DTYPE).tobytes())
    return buf.getvalue()


def decode_dataset(data: bytes) -> list[EventBatch]:
    if len(data) < 6 or data[:4] != DATASET_MAGIC:
        raise DatasetFormatError("not an event dataset (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    pos = 6
    batches = []
    while pos < len(data):
        if pos + _RECORD_HEADER.size > len(data):
            raise DatasetFormatError(f"truncated batch header at byte {pos}")
        label, subject, duration, count = _RECORD_HEADER.unpack_from(data, pos)
        pos += _RECORD_HEADER.size
        nbytes = count * EVENT_DTYPE.itemsize
        if pos + nbytes > len(data):
            raise DatasetFormatError(
                f"batch {len(batches)} declares {count} events but the file ends early"
            )
        events = np.frombuffer(data, dtype=EVENT_DTYPE, count=count, offset=pos).copy()
        pos += nbytes
        try:
            batches.append(EventBatch(label, subject, duration, events))
        except ValueError as exc:
            raise DatasetFormatError(f"batch {len(batches)}: {exc}") from exc
    return batches


def write_dataset(path: str | Path, batches: Sequence[EventBatch]) -> None:
    Path(path).write_bytes(encode_dataset(batches))


def read_dataset(path: str | Path) -> list[EventBatch]:
    return decode_dataset(Path(path).read_bytes())
