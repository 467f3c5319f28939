"""Ground truth: analytic toy scenes, query sampling and spinner angular-velocity tracks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import find_peaks

from .errors import ConfigInvalid, InsufficientForeground, NoMinimaFound
from .events import EventStream
from .simulator import FrameSequence, upsample_factor
from .tracker import QueryPoint
from .tracks import TrackSet

MAX_UPSAMPLE = 64
REFERENCE_QUERY_COUNT = 2048
DEFAULT_FOREGROUND_FRACTION = 0.6
SHAPES = ("square", "disc")


# ------------------------------------------------------------------ textures


@dataclass(frozen=True)
class Texture:
    """Band-limited intensity field: a mean level plus a few random plane waves."""

    fx: np.ndarray
    fy: np.ndarray
    phase: np.ndarray
    amp: np.ndarray
    mean: float
    contrast: float = 0.15  # standard deviation of the wave sum

    @classmethod
    def random(cls, seed: int, waves: int = 8, fmin: float = 1 / 16, fmax: float = 1 / 5,
               mean=None) -> "Texture":
        rng = np.random.default_rng(seed)
        f = rng.uniform(fmin, fmax, waves)
        ang = rng.uniform(0, 2 * np.pi, waves)
        amp = rng.uniform(0.5, 1.0, waves)
        mean = float(rng.uniform(0.35, 0.65)) if mean is None else float(mean)
        # unit variance for independent phases
        amp = amp / np.sqrt((amp ** 2).sum() / 2)
        return cls(f * np.cos(ang), f * np.sin(ang), rng.uniform(0, 2 * np.pi, waves), amp, mean)

    def __call__(self, u, v):
        u = np.asarray(u, dtype=np.float64)[..., None]
        v = np.asarray(v, dtype=np.float64)[..., None]
        s = (self.amp * np.sin(2 * np.pi * (self.fx * u + self.fy * v) + self.phase)).sum(-1)
        return np.clip(self.mean + self.contrast * s, 0.02, 0.98)


# -------------------------------------------------------------------- scenes


@dataclass(frozen=True)
class SpriteSpec:
    """A rigid textured sprite. Later sprites in a scene are drawn on top."""

    x0: float
    y0: float
    size: float = 8.0  # half side (square) or radius (disc), px
    shape: str = "square"
    vx: float = 0.0  # px/s
    vy: float = 0.0
    omega: float = 0.0  # rad/s
    texture_seed: int = 0

    def pose(self, t_s):
        t_s = np.asarray(t_s, dtype=np.float64)
        return self.x0 + self.vx * t_s, self.y0 + self.vy * t_s, self.omega * t_s

    def contains(self, u, v):
        if self.shape == "square":
            return (np.abs(u) <= self.size) & (np.abs(v) <= self.size)
        return u * u + v * v <= self.size * self.size

    def max_speed(self) -> float:
        """Upper bound on the speed of any sprite point, px/s."""
        reach = self.size * (math.sqrt(2) if self.shape == "square" else 1.0)
        return math.hypot(self.vx, self.vy) + abs(self.omega) * reach


@dataclass
class ToySceneConfig:
    width: int = 64
    height: int = 64
    duration_s: float = 0.2
    fps: float = 50.0
    sprites: tuple = ()
    n_random_sprites: int = 0
    max_sprite_speed: float = 60.0  # px/s, random sprites only
    bg_velocity: tuple = (0.0, 0.0)
    texture_seed: int = 0

    def validate(self):
        if self.width < 4 or self.height < 4:
            raise ConfigInvalid("scene must be at least 4x4 px")
        if not (self.duration_s > 0 and self.fps > 0):
            raise ConfigInvalid("duration and fps must be positive")
        if round(self.duration_s * self.fps) < 1:
            raise ConfigInvalid("scene must span at least two frames")
        if self.n_random_sprites < 0:
            raise ConfigInvalid("sprite count must be non-negative")
        for s in self.sprites:
            if s.shape not in SHAPES:
                raise ConfigInvalid(f"unknown sprite shape {s.shape!r}")
            if not s.size > 0:
                raise ConfigInvalid("sprite size must be positive")
            if not all(math.isfinite(v) for v in (s.x0, s.y0, s.vx, s.vy, s.omega)):
                raise ConfigInvalid("sprite motion must be finite")
        if not all(math.isfinite(v) for v in self.bg_velocity):
            raise ConfigInvalid("background velocity must be finite")


@dataclass
class ToyScene:
    """Rendered frames with a dense track per first-frame pixel.

    ``owner`` holds, per track, ``0`` for background or ``j + 1`` for sprite ``j``.
    """

    frames: FrameSequence
    tracks: TrackSet
    owner: np.ndarray
    sprites: tuple
    config: ToySceneConfig
    ids: np.ndarray = field(repr=False, default=None)  # (T, H, W) owner id map per frame

    def max_displacement(self) -> float:
        """Largest per-frame displacement of any point, px."""
        step = np.diff(self.tracks.positions, axis=1)
        return float(np.linalg.norm(step, axis=-1).max()) if step.size else 0.0

    def tracks_from(self, t_start_us: int) -> "ToyScene":
        """The same scene with GT kept only at timestamps ``>= t_start_us``; frames are untouched."""
        tr = self.tracks
        keep = tr.timestamps_us >= t_start_us
        if not keep.any():
            raise ConfigInvalid(f"no frame at or after t={t_start_us} us")
        return replace(self, tracks=TrackSet(tr.positions[:, keep], tr.visible[:, keep], tr.valid[:, keep],
                                             tr.timestamps_us[keep], tr.point_ids))

    def upsample_factor(self) -> int:
        speed = max([s.max_speed() for s in self.sprites] + [math.hypot(*self.config.bg_velocity)])
        return upsample_factor(speed / self.config.fps)


def _random_sprites(cfg: ToySceneConfig, rng: np.random.Generator):
    out = []
    for _ in range(cfg.n_random_sprites):
        size = float(rng.uniform(0.1, 0.25) * min(cfg.width, cfg.height))
        speed = float(rng.uniform(0.2, 1.0) * cfg.max_sprite_speed)
        ang = float(rng.uniform(0, 2 * np.pi))
        out.append(SpriteSpec(
            x0=float(rng.uniform(0, cfg.width - 1)), y0=float(rng.uniform(0, cfg.height - 1)),
            size=size, shape=SHAPES[int(rng.integers(2))],
            vx=speed * math.cos(ang), vy=speed * math.sin(ang),
            omega=float(rng.uniform(-0.5, 0.5)) * cfg.max_sprite_speed / size,
            texture_seed=int(rng.integers(2**31)),
        ))
    return tuple(out)


def _local(sprite: SpriteSpec, x, y, t_s):
    cx, cy, th = sprite.pose(t_s)
    dx, dy = x - cx, y - cy
    c, s = np.cos(th), np.sin(th)
    return c * dx + s * dy, -s * dx + c * dy


def _world(sprite: SpriteSpec, u, v, t_s):
    cx, cy, th = sprite.pose(t_s)
    c, s = np.cos(th), np.sin(th)
    return cx + c * u - s * v, cy + s * u + c * v


def render_frame(sprites, background: Texture, textures, bg_velocity, width, height, t_s):
    """Intensity and owner-id maps at time ``t_s``."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    img = background(x - bg_velocity[0] * t_s, y - bg_velocity[1] * t_s)
    ids = np.zeros((height, width), dtype=np.int32)
    for j, (sp, tex) in enumerate(zip(sprites, textures)):
        u, v = _local(sp, x, y, t_s)
        inside = sp.contains(u, v)
        img = np.where(inside, tex(u, v), img)
        ids[inside] = j + 1
    return np.clip(img, 0.0, 1.0), ids


def _covered(sprites, x, y, t_s, above: int):
    """True where any sprite with index ``>= above`` covers ``(x, y)`` at ``t_s``."""
    hit = np.zeros(np.shape(x), dtype=bool)
    for sp in sprites[above:]:
        u, v = _local(sp, x, y, t_s)
        hit |= sp.contains(u, v)
    return hit


def generate_toy_scene(cfg: ToySceneConfig, rng: np.random.Generator | None = None) -> ToyScene:
    """Render a sprite scene and its analytic dense tracks.

    Every pixel of the first frame seeds one track, attached to whatever is
    on top there. A point is invisible when a sprite above its owner covers
    it or when it leaves the frame.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.texture_seed) if rng is None else rng
    sprites = tuple(cfg.sprites) + _random_sprites(cfg, rng)
    speed = max([s.max_speed() for s in sprites] + [math.hypot(*cfg.bg_velocity)])
    if upsample_factor(speed / cfg.fps) > MAX_UPSAMPLE:
        raise ConfigInvalid(f"motion of {speed:.1f} px/s is too fast for {cfg.fps} fps")
    background = Texture.random(cfg.texture_seed)
    textures = [Texture.random(s.texture_seed + 1000003 * (j + 1)) for j, s in enumerate(sprites)]

    n_frames = int(round(cfg.duration_s * cfg.fps)) + 1
    ts_us = np.round(np.arange(n_frames) * 1e6 / cfg.fps).astype(np.int64)
    t_s = ts_us / 1e6
    frames, id_maps = [], []
    for t in t_s:
        img, ids = render_frame(sprites, background, textures, cfg.bg_velocity, cfg.width, cfg.height, t)
        frames.append(img)
        id_maps.append(ids)

    owner = id_maps[0].reshape(-1).astype(np.int64)
    y0, x0 = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    x0, y0 = x0.reshape(-1), y0.reshape(-1)
    n = len(owner)
    pos = np.zeros((n, n_frames, 2))
    vis = np.zeros((n, n_frames), dtype=bool)
    bg = owner == 0
    for k, t in enumerate(t_s):
        pos[bg, k, 0] = x0[bg] + cfg.bg_velocity[0] * t
        pos[bg, k, 1] = y0[bg] + cfg.bg_velocity[1] * t
        vis[bg, k] = ~_covered(sprites, pos[bg, k, 0], pos[bg, k, 1], t, 0)
    for j, sp in enumerate(sprites):
        sel = owner == j + 1
        if not sel.any():
            continue
        u, v = _local(sp, x0[sel], y0[sel], 0.0)
        for k, t in enumerate(t_s):
            px, py = _world(sp, u, v, t)
            pos[sel, k, 0], pos[sel, k, 1] = px, py
            vis[sel, k] = ~_covered(sprites, px, py, t, j + 1)
    in_frame = ((pos[..., 0] >= -0.5) & (pos[..., 0] < cfg.width - 0.5)
                & (pos[..., 1] >= -0.5) & (pos[..., 1] < cfg.height - 0.5))
    tracks = TrackSet(pos, vis & in_frame, np.ones_like(vis), ts_us)
    return ToyScene(FrameSequence(np.stack(frames), ts_us), tracks, owner, sprites, cfg,
                    np.stack(id_maps))


def translating_texture_scene(width=64, height=64, n_frames=12, fps=100.0, velocity=(20.0, 0.0),
                              texture_seed=0) -> ToyScene:
    """A full-frame texture sliding at constant velocity (no sprites)."""
    cfg = ToySceneConfig(width, height, (n_frames - 1) / fps, fps, bg_velocity=tuple(velocity),
                         texture_seed=texture_seed)
    return generate_toy_scene(cfg)


def sample_query_tracks(scene: ToyScene, n: int, foreground_fraction: float = DEFAULT_FOREGROUND_FRACTION,
                        rng: np.random.Generator | None = None):
    """Pick ``n`` tracks, at least ``ceil(fraction * n)`` of them on sprites.

    Each query sits at its track's first visible timestep; the returned GT
    subset is valid from that timestep on.
    """
    if not 0.0 <= foreground_fraction <= 1.0:
        raise ValueError("foreground_fraction must lie in [0, 1]")
    rng = np.random.default_rng() if rng is None else rng
    gt = scene.tracks
    seen = gt.visible.any(axis=1)
    cand = np.nonzero(seen)[0]
    fg = cand[scene.owner[cand] > 0]
    n_fg = int(math.ceil(foreground_fraction * n - 1e-12))
    if n_fg > len(fg):
        raise InsufficientForeground(f"need {n_fg} foreground tracks, scene has {len(fg)}")
    if n > len(cand):
        raise ValueError(f"asked for {n} tracks, scene has {len(cand)} visible ones")
    chosen = rng.choice(fg, size=n_fg, replace=False) if n_fg else np.zeros(0, dtype=np.int64)
    rest = np.setdiff1d(cand, chosen)
    extra = rng.choice(rest, size=n - n_fg, replace=False) if n > n_fg else np.zeros(0, dtype=np.int64)
    idx = np.sort(np.concatenate([chosen, extra]).astype(np.int64))
    sub = gt.subset(idx)
    t_q = sub.visible.argmax(axis=1)
    valid = np.arange(sub.n_steps)[None, :] >= t_q[:, None]
    queries = [QueryPoint(int(k), float(sub.positions[i, k, 0]), float(sub.positions[i, k, 1]))
               for i, k in enumerate(t_q)]
    return queries, TrackSet(sub.positions, sub.visible & valid, valid, sub.timestamps_us, sub.point_ids)


# ------------------------------------------------------------------- spinner


@dataclass
class SpinnerGtConfig:
    hist_events: int = 20000
    hist_rate_hz: float = 1000.0
    lobes: int = 3
    center: tuple = (0.0, 0.0)
    radii: tuple = ()
    angles: tuple = ()  # rad, phase of each query point at the first histogram time
    output_rate_hz: float = 330.0
    min_window: int = 5  # minimum must be the smallest within +-min_window samples
    min_prominence: float = 0.1  # fraction of the series range
    direction: int = 1

    def validate(self):
        if self.lobes < 1:
            raise ConfigInvalid("lobe count must be >= 1")
        if not (self.hist_rate_hz > 0 and self.output_rate_hz > 0):
            raise ConfigInvalid("rates must be positive")
        if self.hist_events < 1 or self.min_window < 1:
            raise ConfigInvalid("histogram size and window must be positive")
        if len(self.radii) != len(self.angles):
            raise ConfigInvalid("radii and angles must pair up")
        if self.direction not in (1, -1):
            raise ConfigInvalid("direction must be +1 or -1")


@dataclass
class SpinnerEstimate:
    tick_us: np.ndarray  # histogram times
    distance: np.ndarray  # L2 distance of each histogram to the first
    minima_us: np.ndarray  # refined minimum times (float us)
    omega: np.ndarray  # rad/s per segment, segment i ends at minima_us[i]

    @property
    def t0_us(self) -> int:
        return int(self.tick_us[0])

    @property
    def boundaries_us(self) -> np.ndarray:
        return np.concatenate([[float(self.tick_us[0])], self.minima_us])

    def angle(self, t_us, lobes: int) -> np.ndarray:
        """Rotation since the first histogram, integrating piecewise-constant omega."""
        t_us = np.asarray(t_us, dtype=np.float64)
        b = self.boundaries_us
        step = 2 * np.pi / lobes
        turns = np.arange(len(b)) * step
        ang = np.interp(t_us, b, turns)
        before, after = t_us < b[0], t_us > b[-1]
        ang = np.where(before, (t_us - b[0]) * 1e-6 * self.omega[0], ang)
        return np.where(after, turns[-1] + (t_us - b[-1]) * 1e-6 * self.omega[-1], ang)


def spinner_histograms(stream: EventStream, cfg: SpinnerGtConfig):
    """Signed histograms of the last ``hist_events`` events at a fixed tick rate.

    Returns ``(tick_us, distance_to_first)``.
    """
    n = len(stream)
    if n < cfg.hist_events:
        raise NoMinimaFound(f"stream has {n} events, a histogram needs {cfg.hist_events}")
    period = 1e6 / cfg.hist_rate_hz
    t_start = int(stream.t[0])
    k0 = int(math.ceil((int(stream.t[cfg.hist_events - 1]) - t_start) / period))
    k_end = int(math.floor((int(stream.t[-1]) - t_start) / period))
    ticks = t_start + np.round(np.arange(k0, k_end + 1) * period).astype(np.int64)
    if len(ticks) < 2:
        raise NoMinimaFound("stream too short for two histograms")
    pix = (np.round(stream.y).astype(np.int64) * stream.width + np.round(stream.x).astype(np.int64))
    ends = np.searchsorted(stream.t, ticks, side="right")
    size = stream.width * stream.height
    first = None
    dist = np.zeros(len(ticks))
    for i, e in enumerate(ends):
        sl = slice(e - cfg.hist_events, e)
        h = np.bincount(pix[sl], weights=stream.p[sl].astype(np.float64), minlength=size)
        if first is None:
            first = h
        dist[i] = np.linalg.norm(h - first)
    return ticks, dist


def detect_minima(series, window: int = 5, prominence: float = 0.1):
    """Indices and sub-sample offsets of prominent local minima (index 0 excluded)."""
    series = np.asarray(series, dtype=np.float64)
    span = float(series.max() - series.min()) if len(series) else 0.0
    if span <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    peaks, _ = find_peaks(-series, prominence=prominence * span)
    keep, frac = [], []
    for k in peaks:
        if k < 1 or k + window >= len(series):
            continue
        lo = max(0, k - window)
        if series[k] > series[lo:k + window + 1].min():
            continue
        a, b, c = series[k - 1], series[k], series[k + 1]
        curv = a - 2 * b + c
        off = 0.5 * (a - c) / curv if curv > 0 else 0.0
        keep.append(k)
        frac.append(float(np.clip(off, -0.5, 0.5)))
    return np.array(keep, dtype=np.int64), np.array(frac)


def estimate_spinner(stream: EventStream, cfg: SpinnerGtConfig) -> SpinnerEstimate:
    cfg.validate()
    ticks, dist = spinner_histograms(stream, cfg)
    idx, frac = detect_minima(dist, cfg.min_window, cfg.min_prominence)
    if len(idx) == 0:
        raise NoMinimaFound("no prominent minima in the histogram distance series")
    period = 1e6 / cfg.hist_rate_hz
    minima = ticks[idx].astype(np.float64) + frac * period
    b = np.concatenate([[float(ticks[0])], minima])
    omega = (2 * np.pi / cfg.lobes) / (np.diff(b) * 1e-6)
    return SpinnerEstimate(ticks, dist, minima, omega)


def spinner_groundtruth(stream: EventStream, cfg: SpinnerGtConfig, estimate: SpinnerEstimate | None = None) -> TrackSet:
    """Circular tracks about ``cfg.center`` following the recovered rotation.

    Output runs at ``cfg.output_rate_hz`` from the first to the last histogram time.
    """
    est = estimate_spinner(stream, cfg) if estimate is None else estimate
    t0, t1 = int(est.tick_us[0]), int(est.tick_us[-1])
    step = 1e6 / cfg.output_rate_hz
    ts = t0 + np.round(np.arange(int((t1 - t0) // step) + 1) * step).astype(np.int64)
    ang = cfg.direction * est.angle(ts, cfg.lobes)
    radii = np.asarray(cfg.radii, dtype=np.float64)[:, None]
    phi = np.asarray(cfg.angles, dtype=np.float64)[:, None] + ang[None, :]
    pos = np.stack([cfg.center[0] + radii * np.cos(phi), cfg.center[1] + radii * np.sin(phi)], -1)
    ones = np.ones(pos.shape[:2], dtype=bool)
    return TrackSet(pos, ones, ones, ts)


def spinner_frames(width: int, height: int, center, radius: float, lobes: int, angle_fn,
                   timestamps_us) -> FrameSequence:
    """Render a ``lobes``-fold symmetric disc pattern rotated by ``angle_fn(t_s)``.

    Image y points down, so a positive angle turns the pattern clockwise on
    screen; the pattern's phase at pixel angle ``phi`` is ``phi - angle``.
    """
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = x - center[0], y - center[1]
    r = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)
    env = np.clip(radius + 1.0 - r, 0.0, 1.0) * np.clip(r / 4.0, 0.0, 1.0)
    frames = []
    for t in np.asarray(timestamps_us) / 1e6:
        a = angle_fn(t)
        frames.append(0.5 + 0.35 * env * np.cos(lobes * (phi - a) + r / 6.0))
    return FrameSequence(np.stack(frames), timestamps_us)


def piecewise_angle(omegas, durations_s):
    """``angle(t)`` for constant ``omegas[i]`` over consecutive ``durations_s[i]``; last one extends."""
    omegas = np.asarray(omegas, dtype=np.float64)
    starts = np.concatenate([[0.0], np.cumsum(durations_s)[:-1]])
    base = np.concatenate([[0.0], np.cumsum(omegas[:-1] * np.asarray(durations_s)[:-1])])

    def angle(t):
        i = int(np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(omegas) - 1))
        return base[i] + omegas[i] * (t - starts[i])

    return angle
