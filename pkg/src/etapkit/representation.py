"""Grid representations of event windows: mixed-density stacks and voxel grids."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyWindow
from .events import EventWindow

DEFAULT_BINS = 10
STD_FLOOR = 1e-6
NOISE_SIGMA = 0.1
# noise std of channel c is sigma * n_c / N_e
NOISE_SCALING = "event_count_ratio"


@dataclass
class EventStack:
    """``(H, W, B)`` grid; ``n_events`` is the window size used to build it."""

    data: np.ndarray
    n_events: int
    t_end_us: int = 0
    kind: str = "stack"

    @property
    def bins(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def channel_counts(self):
        return channel_event_counts(self.n_events, self.bins)


@dataclass
class StackBatch:
    stacks: list
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def array(self) -> np.ndarray:
        """Stacked data of shape ``(T, H, W, B)``."""
        return np.stack([s.data for s in self.stacks])


def channel_event_counts(n_events: int, bins: int) -> list[int]:
    return [n_events // 2 ** c for c in range(bins)]


def _splat(x, y, weight, height, width):
    """Bilinear deposit of ``weight`` at continuous ``(x, y)``; returns a flat ``H*W`` grid.

    Neighbours outside the grid are dropped.
    """
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    out = np.zeros(height * width)
    for dx, dy, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi, yi = x0 + dx, y0 + dy
        keep = (wgt != 0) & (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        if keep.any():
            out += np.bincount(yi[keep] * width + xi[keep], weights=(weight * wgt)[keep],
                               minlength=height * width)
    return out


def build_event_stack(window: EventWindow, bins: int = DEFAULT_BINS) -> EventStack:
    """Mixed-density stack: channel ``c`` holds the ``floor(N/2**c)`` newest events."""
    n = len(window)
    if n == 0:
        raise EmptyWindow("cannot build a stack from an empty window")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    h, w = window.height, window.width
    counts = channel_event_counts(n, bins)
    data = np.zeros((h, w, bins))
    acc = np.zeros(h * w)
    pol = window.p.astype(np.float64)
    # channels are nested suffixes; build from the smallest outwards
    upper = n
    for c in range(bins - 1, -1, -1):
        lo = n - counts[c]
        if lo < upper:
            sl = slice(lo, upper)
            acc = acc + _splat(window.x[sl], window.y[sl], pol[sl], h, w)
            upper = lo
        data[:, :, c] = acc.reshape(h, w)
    return EventStack(data, n, window.t_end_us)


def build_voxel_grid(window: EventWindow, bins: int = DEFAULT_BINS) -> EventStack:
    """Time-bilinear voxel grid over the window interval.

    Bin centres sit at ``t_start + k * span / (bins - 1)`` for ``k = 0..bins-1``.
    """
    n = len(window)
    if n == 0:
        raise EmptyWindow("cannot build a voxel grid from an empty window")
    h, w = window.height, window.width
    t_start = window.t_end_us - window.span_us
    if window.span_us > 0 and bins > 1:
        tn = (bins - 1) * (window.t - t_start) / window.span_us
    else:
        tn = np.full(n, bins - 1, dtype=np.float64)
    b0 = np.clip(np.floor(tn).astype(np.int64), 0, bins - 1)
    fb = tn - b0
    pol = window.p.astype(np.float64)
    data = np.zeros((h, w, bins))
    for b in range(bins):
        lower = b0 == b
        upper = (b0 + 1 == b) & (fb > 0)
        x = np.concatenate([window.x[lower], window.x[upper]])
        y = np.concatenate([window.y[lower], window.y[upper]])
        m = np.concatenate([pol[lower] * (1 - fb[lower]), pol[upper] * fb[upper]])
        if len(m):
            data[:, :, b] = _splat(x, y, m, h, w).reshape(h, w)
    return EventStack(data, n, window.t_end_us, kind="voxel")


def normalize_batch(batch: StackBatch, std_floor: float = STD_FLOOR) -> StackBatch:
    """Per-channel standardisation over batch, time and space jointly."""
    if not batch.stacks:
        raise ValueError("empty batch")
    arr = batch.array()
    axes = tuple(range(arr.ndim - 1))
    mean = arr.mean(axis=axes)
    std = np.maximum(arr.std(axis=axes), std_floor)
    out = (arr - mean) / std
    stacks = [EventStack(o, s.n_events, s.t_end_us, s.kind) for o, s in zip(out, batch.stacks)]
    return StackBatch(stacks, mean, std, dict(batch.meta))


def add_noise(stack: EventStack, sigma: float, rng: np.random.Generator) -> EventStack:
    """Gaussian noise, ``sigma`` on channel 1 and scaled by the event-count ratio elsewhere."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return stack
    ratio = np.array(stack.channel_counts(), dtype=np.float64) / max(stack.n_events, 1)
    noise = rng.standard_normal(stack.data.shape) * (sigma * ratio)
    return EventStack(stack.data + noise, stack.n_events, stack.t_end_us, stack.kind)


def export_stack(path, stack: EventStack) -> None:
    """Write ``<path>`` as flat little-endian f32 (H, W, B order) plus ``<path>.json``."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())
    meta = {"W": stack.width, "H": stack.height, "B": stack.bins,
            "t_end_us": int(stack.t_end_us), "n_events": int(stack.n_events), "kind": stack.kind}
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_stack(path) -> EventStack:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    data = data.reshape(meta["H"], meta["W"], meta["B"])
    return EventStack(data, meta["n_events"], meta["t_end_us"], meta.get("kind", "stack"))
