"""Event data model, windowing and motion transforms.

Streams are stored column-wise (``t``, ``x``, ``y``, ``p``) as numpy arrays;
:class:`Event` exists for single-event convenience and for readable tests.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import EmptyWindow, FormatError, InsufficientEvents

EVT1_MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sIIQ")
EVT1_RECORD = np.dtype(
    [("t", "<u8"), ("x", "<f4"), ("y", "<f4"), ("p", "i1"), ("pad", "V7")]
)
assert EVT1_RECORD.itemsize == 24

QUARTER_TURNS = {0: 0, 90: 1, 180: 2, 270: 3}


@dataclass(frozen=True)
class Event:
    x: float
    y: float
    t_us: int
    polarity: int


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.setflags(write=False)
    return a


class _Events:
    """Shared column storage for streams and windows."""

    def __init__(self, width, height, t, x, y, p):
        self.width = int(width)
        self.height = int(height)
        self.t = _frozen(t, np.int64)
        self.x = _frozen(x, np.float64)
        self.y = _frozen(y, np.float64)
        self.p = _frozen(p, np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns have different lengths")
        if n and not np.all(np.isin(self.p, (-1, 1))):
            raise ValueError("polarity must be -1 or +1")

    def __len__(self):
        return len(self.t)

    @property
    def geometry(self):
        return self.width, self.height

    def events(self) -> list[Event]:
        return [
            Event(float(x), float(y), int(t), int(p))
            for t, x, y, p in zip(self.t, self.x, self.y, self.p)
        ]

    def as_records(self):
        """Rows ``(t, x, y, p)`` as a plain list, handy for multiset comparisons."""
        return list(zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()))

    def _same_events(self, other):
        return (
            self.geometry == other.geometry
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )


class EventStream(_Events):
    """A time-ordered event stream on a ``width x height`` sensor."""

    def __init__(self, width, height, t, x, y, p, *, check=True):
        super().__init__(width, height, t, x, y, p)
        if check:
            if len(self.t) and np.any(np.diff(self.t) < 0):
                raise ValueError("timestamps must be non-decreasing")
            if len(self.t) and (
                self.x.min() < 0
                or self.y.min() < 0
                or self.x.max() >= self.width
                or self.y.max() >= self.height
            ):
                raise ValueError("event outside sensor geometry")

    @classmethod
    def empty(cls, width, height):
        return cls(width, height, [], [], [], [])

    @classmethod
    def from_events(cls, width, height, events: Iterable[Event]):
        events = list(events)
        return cls(
            width,
            height,
            [e.t_us for e in events],
            [e.x for e in events],
            [e.y for e in events],
            [e.polarity for e in events],
        )

    @classmethod
    def from_unsorted(cls, width, height, t, x, y, p):
        """Build a stream from unordered columns using a stable time sort."""
        t = np.asarray(t, dtype=np.int64)
        order = np.argsort(t, kind="stable")
        return cls(width, height, t[order], np.asarray(x)[order], np.asarray(y)[order], np.asarray(p)[order])

    def __eq__(self, other):
        return isinstance(other, EventStream) and self._same_events(other)

    def __repr__(self):
        return f"EventStream({self.width}x{self.height}, n={len(self)})"

    def as_window(self, t_start_us=None, t_end_us=None) -> "EventWindow":
        """View the whole stream as one window over ``(t_start_us, t_end_us]``.

        Defaults span the first to the last event, which puts the first event
        on the open boundary; pass ``t_start_us`` explicitly when that matters.
        """
        if len(self) == 0:
            raise EmptyWindow("stream has no events")
        t_end = int(self.t[-1]) if t_end_us is None else int(t_end_us)
        t_start = int(self.t[0]) if t_start_us is None else int(t_start_us)
        return EventWindow(self.width, self.height, self.t, self.x, self.y, self.p,
                           t_end_us=t_end, span_us=t_end - t_start)


class EventWindow(_Events):
    """Events aligned with a tracking timestep ``t_end_us``.

    ``span_us`` is the window length; the covered interval is
    ``(t_end_us - span_us, t_end_us]``.
    """

    def __init__(self, width, height, t, x, y, p, *, t_end_us, span_us):
        super().__init__(width, height, t, x, y, p)
        self.t_end_us = int(t_end_us)
        self.span_us = int(span_us)

    @property
    def midpoint_us(self) -> float:
        return self.t_end_us - self.span_us / 2.0

    def __eq__(self, other):
        return (
            isinstance(other, EventWindow)
            and self._same_events(other)
            and self.t_end_us == other.t_end_us
            and self.span_us == other.span_us
        )

    def __repr__(self):
        return (f"EventWindow({self.width}x{self.height}, n={len(self)}, "
                f"t_end={self.t_end_us}, span={self.span_us})")


def select_window(stream: EventStream, t_end_us: int, n_events: int) -> EventWindow:
    """Return the ``n_events`` most recent events with ``t <= t_end_us``."""
    if n_events < 1:
        raise ValueError("n_events must be positive")
    stop = int(np.searchsorted(stream.t, t_end_us, side="right"))
    if stop < n_events:
        raise InsufficientEvents(
            f"only {stop} events precede t={t_end_us} us, need {n_events}"
        )
    sl = slice(stop - n_events, stop)
    t = stream.t[sl]
    return EventWindow(
        stream.width, stream.height, t, stream.x[sl], stream.y[sl], stream.p[sl],
        t_end_us=t_end_us, span_us=int(t_end_us - t[0]),
    )


def invert_time(window: EventWindow) -> EventWindow:
    """Replay a window backwards: ``t -> 2*mid - t`` with flipped polarity."""
    if len(window) == 0:
        raise EmptyWindow("cannot invert an empty window")
    # 2*mid = 2*t_end - span keeps everything in integer microseconds
    t = 2 * window.t_end_us - window.span_us - window.t
    # reversing first keeps ties in reverse stream order, which makes the map an involution
    t, x, y, p = t[::-1], window.x[::-1], window.y[::-1], -window.p[::-1]
    order = np.argsort(t, kind="stable")
    return EventWindow(
        window.width, window.height, t[order], x[order], y[order], p[order],
        t_end_us=window.t_end_us, span_us=window.span_us,
    )


def rotate_points(x, y, width, height, theta):
    """Rotate pixel coordinates by a quarter turn (90 deg counter-clockwise steps).

    Returns ``(x', y', width', height')``.
    """
    k = _quarter(theta)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    for _ in range(k):
        x, y = y, (width - 1) - x
        width, height = height, width
    return x, y, width, height


def _quarter(theta):
    try:
        return QUARTER_TURNS[int(theta) % 360]
    except (KeyError, ValueError, TypeError):
        raise ValueError(f"rotation must be a multiple of 90 degrees, got {theta!r}") from None


def rotate_events(window: EventWindow, theta: int) -> EventWindow:
    x, y, w, h = rotate_points(window.x, window.y, window.width, window.height, theta)
    return EventWindow(w, h, window.t, x, y, window.p,
                       t_end_us=window.t_end_us, span_us=window.span_us)


# --------------------------------------------------------------------------- io


def write_evt1(path, stream: EventStream) -> None:
    rec = np.zeros(len(stream), dtype=EVT1_RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EVT1_MAGIC, stream.width, stream.height, len(stream)))
        f.write(rec.tobytes())


def read_evt1(path) -> EventStream:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated EVT1 header")
    magic, w, h, n = _HEADER.unpack_from(data, 0)
    if magic != EVT1_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = data[_HEADER.size:]
    if len(body) != n * EVT1_RECORD.itemsize:
        raise FormatError(f"{path}: expected {n} records, got {len(body)} bytes")
    rec = np.frombuffer(body, dtype=EVT1_RECORD)
    return EventStream(w, h, rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"])


def write_events_csv(path, stream: EventStream) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t_us", "x", "y", "p"])
        for t, x, y, p in stream.as_records():
            w.writerow([t, repr(float(np.float32(x))), repr(float(np.float32(y))), p])


def read_events_csv(path, width, height) -> EventStream:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["t_us", "x", "y", "p"]:
            raise FormatError(f"{path}: expected header t_us,x,y,p")
        rows = list(reader)
    return EventStream(
        width, height,
        [int(r["t_us"]) for r in rows],
        [float(r["x"]) for r in rows],
        [float(r["y"]) for r in rows],
        [int(r["p"]) for r in rows],
    )
