"""Video-to-events simulation with a per-pixel log-intensity integrator.

Between consecutive frames the log intensity of every pixel is linear in
time. A pixel keeps a reference level ``L0 + n*C`` (``n`` an integer count,
so the reference never drifts through repeated float additions) and fires
one event each time ``L(t) - ref >= C`` or ``L(t) - ref <= -C`` at an integer
microsecond ``t``. The event timestamp is the first integer microsecond at
which the crossing condition holds.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidRange, NotUpsampled
from .events import EventStream

log = logging.getLogger(__name__)

DEFAULT_LOG_EPS = 1e-3
REFERENCE_CONTRAST_RANGE = (0.16, 0.34)
ABLATION_CONTRAST_RANGE = (0.20, 1.50)


@dataclass(frozen=True)
class ContrastConfig:
    c_pos: float
    c_neg: float
    log_eps: float = DEFAULT_LOG_EPS

    def __post_init__(self):
        if not (self.c_pos > 0 and self.c_neg > 0 and self.log_eps > 0):
            raise ValueError("contrast thresholds and log_eps must be positive")


class FrameSequence:
    """Intensity frames in [0, 1] with strictly increasing integer timestamps (us)."""

    def __init__(self, frames, timestamps_us):
        frames = np.asarray(frames, dtype=np.float64)
        ts = np.asarray(timestamps_us)
        if frames.ndim != 3:
            raise ValueError("frames must be an array of shape (T, H, W)")
        if len(frames) < 2 or len(ts) != len(frames):
            raise ValueError("need at least two frames with one timestamp each")
        if not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(ts != np.round(ts)):
            raise ValueError("timestamps must be whole microseconds")
        self.frames = frames
        self.timestamps_us = ts.astype(np.int64)

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    def __len__(self):
        return len(self.frames)

    def reversed(self) -> "FrameSequence":
        """Same timestamps, frames played backwards."""
        return FrameSequence(self.frames[::-1].copy(), self.timestamps_us)


def sample_threshold(rng: np.random.Generator, lo=REFERENCE_CONTRAST_RANGE[0],
                     hi=REFERENCE_CONTRAST_RANGE[1], log_eps=DEFAULT_LOG_EPS) -> ContrastConfig:
    """Draw one contrast sensitivity ``C ~ U(lo, hi)`` shared by both polarities."""
    if not (0 < lo <= hi):
        raise InvalidRange(f"need 0 < lo <= hi, got ({lo}, {hi})")
    c = lo if lo == hi else float(rng.uniform(lo, hi))
    return ContrastConfig(c, c, log_eps)


def log_intensity(frame, log_eps=DEFAULT_LOG_EPS):
    return np.log(np.asarray(frame, dtype=np.float64) + log_eps)


def upsample_linear(seq: FrameSequence, factor: int) -> FrameSequence:
    """Insert ``factor - 1`` intensity-interpolated frames between each pair.

    Inserted timestamps are rounded to whole microseconds, so every source
    interval must be at least ``factor`` us long.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return seq
    f, ts = seq.frames, seq.timestamps_us
    if np.any(np.diff(ts) < factor):
        raise ValueError("frame interval shorter than the upsampling factor")
    alpha = np.arange(factor) / factor
    out = (f[:-1, None] * (1 - alpha)[None, :, None, None]
           + f[1:, None] * alpha[None, :, None, None]).reshape(-1, *f.shape[1:])
    out_t = (ts[:-1, None] + np.rint(alpha[None, :] * np.diff(ts)[:, None])).reshape(-1)
    return FrameSequence(np.concatenate([out, f[-1:]]), np.append(out_t, ts[-1]).astype(np.int64))


def upsample_factor(max_displacement_px: float) -> int:
    """Smallest factor bringing the per-frame displacement down to <= 1 px."""
    return max(1, int(np.ceil(max_displacement_px - 1e-12)))


def _interp(a, b, t0, t1, t):
    # single definition of the in-segment log level, shared by every crossing test
    return a + (b - a) * ((t - t0) / (t1 - t0))


def simulate_log_events(log_frames, timestamps_us, c_pos, c_neg, max_log_step=None):
    """Integrate log frames ``(T, H, W)`` into event columns ``(t, x, y, p)``.

    Returned columns are sorted by time, then pixel (row-major), then emission
    order within a pixel.
    """
    L = np.asarray(log_frames, dtype=np.float64)
    ts = np.asarray(timestamps_us, dtype=np.int64)
    n_frames, h, w = L.shape
    L = L.reshape(n_frames, -1)
    if max_log_step is not None:
        step = np.abs(np.diff(L, axis=0)).max(initial=0.0)
        if step > max_log_step:
            raise NotUpsampled(
                f"log-intensity step {step:.3f} exceeds bound {max_log_step:.3f}; upsample further"
            )
    base = L[0].copy()
    n_up = np.zeros(L.shape[1], dtype=np.int64)
    n_down = np.zeros(L.shape[1], dtype=np.int64)
    chunks_t, chunks_pix, chunks_p = [], [], []

    for k in range(n_frames - 1):
        a, b = L[k], L[k + 1]
        t0, t1 = float(ts[k]), float(ts[k + 1])
        end = _interp(a, b, t0, t1, t1)
        for sign, c in ((1, c_pos), (-1, c_neg)):
            ref = base + n_up * c_pos - n_down * c_neg
            # pixels whose segment end already satisfies the next crossing
            pix = np.nonzero(_crossing(end, ref, sign, c))[0]
            t_prev = np.full(pix.shape, ts[k] + 1, dtype=np.int64)
            while pix.size:
                aa, bb, rr = a[pix], b[pix], ref[pix]
                with np.errstate(divide="ignore", invalid="ignore"):
                    frac = (rr + sign * c - aa) / (bb - aa)
                guess = np.ceil(t0 + np.nan_to_num(frac, nan=1.0) * (t1 - t0) - 1e-9)
                cand = np.clip(guess, t_prev, ts[k + 1]).astype(np.int64)
                cand = _first_true(aa, bb, t0, t1, cand, t_prev, rr, sign, c)
                chunks_t.append(cand)
                chunks_pix.append(pix)
                chunks_p.append(np.full(pix.shape, sign, dtype=np.int8))
                if sign > 0:
                    n_up[pix] += 1
                else:
                    n_down[pix] += 1
                ref[pix] = base[pix] + n_up[pix] * c_pos - n_down[pix] * c_neg
                more = _crossing(end[pix], ref[pix], sign, c)
                pix, t_prev = pix[more], cand[more]

    if not chunks_t:
        empty = np.zeros(0)
        return empty.astype(np.int64), empty, empty, empty.astype(np.int8)
    t = np.concatenate(chunks_t)
    pix = np.concatenate(chunks_pix)
    p = np.concatenate(chunks_p)
    # emission index keeps same-pixel same-time events in their firing order
    order = np.lexsort((np.arange(len(t)), pix, t))
    t, pix, p = t[order], pix[order], p[order]
    return t, (pix % w).astype(np.float64), (pix // w).astype(np.float64), p


def _crossing(level, ref, sign, c):
    if sign > 0:
        return (level - ref) >= c
    return (level - ref) <= -c


def _first_true(a, b, t0, t1, cand, lo, ref, sign, c):
    """Move ``cand`` to the earliest integer time in ``[lo, cand]`` where the crossing holds."""
    cand = cand.copy()

    def holds(t):
        return _crossing(_interp(a, b, t0, t1, t.astype(np.float64)), ref, sign, c)

    bad = ~holds(cand)
    while bad.any():
        cand[bad] += 1
        bad = ~holds(cand)
    while True:
        back = (cand - 1 >= lo) & holds(cand - 1)
        if not back.any():
            return cand
        cand[back] -= 1


def simulate_events(seq: FrameSequence, cfg: ContrastConfig, max_log_step=None) -> EventStream:
    """Simulate the event stream produced by ``seq``.

    ``max_log_step`` is an optional sanity bound on the per-frame log change;
    exceeding it raises :class:`NotUpsampled`.
    """
    L = log_intensity(seq.frames, cfg.log_eps)
    t, x, y, p = simulate_log_events(L, seq.timestamps_us, cfg.c_pos, cfg.c_neg, max_log_step)
    log.debug("simulated %d events from %d frames", len(t), len(seq))
    return EventStream(seq.width, seq.height, t, x, y, p, check=False)


# --------------------------------------------------------------------------- io


def read_frame_dir(directory) -> FrameSequence:
    """Load 8-bit grayscale PGM/PNG frames listed in ``timestamps.csv`` (``index,t_us``)."""
    from PIL import Image

    directory = Path(directory)
    manifest = directory / "timestamps.csv"
    if not manifest.exists():
        raise FormatError(f"{directory}: missing timestamps.csv")
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["index", "t_us"]:
            raise FormatError(f"{manifest}: expected header index,t_us")
        rows = sorted(((int(r["index"]), int(r["t_us"])) for r in reader))
    frames = []
    for idx, _ in rows:
        candidates = [directory / f"{idx:06d}{ext}" for ext in (".png", ".pgm")]
        path = next((c for c in candidates if c.exists()), None)
        if path is None:
            raise FormatError(f"{directory}: no image for frame {idx}")
        with Image.open(path) as im:
            frames.append(np.asarray(im.convert("L"), dtype=np.float64) / 255.0)
    return FrameSequence(np.stack(frames), [t for _, t in rows])


def write_frame_dir(directory, seq: FrameSequence, fmt="png") -> None:
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        img = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(directory / f"{i:06d}.{fmt}")
    with open(directory / "timestamps.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "t_us"])
        for i, t in enumerate(seq.timestamps_us):
            w.writerow([i, int(t)])
