"""Sliding-window point tracker with iterative transformer refinement.

Shapes inside a window: ``P`` points, ``w`` slots. Window pyramids carry
the slot as their leading dimension, ``(w, d, h, w_)`` per level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InsufficientEvents, NonFiniteUpdate, QueryOutOfSchedule
from .events import EventStream, select_window
from .features import (
    EncoderConfig,
    FeaturePyramid,
    bilinear_sample,
    correlation_dim,
    correlation_lookup,
    encode_tensor,
    make_encoder,
    stack_to_tensor,
    to_level,
)
from .representation import StackBatch, build_event_stack, normalize_batch
from .tracks import TrackSet


@dataclass(frozen=True)
class QueryPoint:
    t_index: int
    x: float
    y: float

    @property
    def pos(self):
        return (self.x, self.y)


@dataclass
class TrackWindowState:
    positions: torch.Tensor  # (P, w, 2)
    descriptors: torch.Tensor  # (P, w, d)
    vis_logits: torch.Tensor  # (P, w)
    active: torch.Tensor  # (P, w) bool
    iterations: list = field(default_factory=list)  # positions after each refinement

    @property
    def n_points(self):
        return self.positions.shape[0]

    @property
    def visibility(self):
        return torch.sigmoid(self.vis_logits)


# ----------------------------------------------------------------- encodings


def sincos(values: torch.Tensor, width: int, max_period: float = 10000.0) -> torch.Tensor:
    """Transformer-style sinusoidal encoding of a scalar field, ``(...,) -> (..., width)``."""
    half = max(width // 2, 1)
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=values.dtype) / half)
    ang = values.unsqueeze(-1) * freqs
    enc = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return F.pad(enc, (0, max(width - enc.shape[-1], 0)))[..., :width]


def sincos_2d(pos: torch.Tensor, width: int) -> torch.Tensor:
    half = width // 2
    enc = torch.cat([sincos(pos[..., 0], half), sincos(pos[..., 1], width - half)], dim=-1)
    return enc


def fourier_offsets(delta: torch.Tensor, n_freqs: int, scale: float) -> torch.Tensor:
    """Multi-frequency encoding of a displacement ``(..., 2) -> (..., 4 * n_freqs)``."""
    freqs = (2.0 ** torch.arange(n_freqs, dtype=delta.dtype)) * (math.pi / scale)
    ang = delta.unsqueeze(-1) * freqs  # (..., 2, F)
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)


# ------------------------------------------------------------------- refiner


class _Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError("hidden width must be divisible by the head count")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, key_ok):
        # x (B, L, D); key_ok (B, L, L) True where query may attend to key
        b, n, dim = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, dim // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dim // self.heads)
        scores = scores.masked_fill(~key_ok.unsqueeze(1), float("-inf"))
        att = torch.softmax(scores, dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, n, dim))


class _Block(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x, key_ok):
        x = x + self.attn(self.norm1(x), key_ok)
        return x + self.mlp(self.norm2(x))


def _key_mask(active_rows: torch.Tensor) -> torch.Tensor:
    """``(B, L)`` activity -> ``(B, L, L)`` key mask; every query may always see itself."""
    n = active_rows.shape[-1]
    eye = torch.eye(n, dtype=torch.bool)
    return active_rows.unsqueeze(-2).expand(-1, n, -1) | eye


class Refiner(nn.Module):
    """Token projection, alternating point/time attention, and update heads."""

    def __init__(self, d=128, corr_dim=196, eta_freqs=8, eta_scale=16.0, hidden=128,
                 heads=4, blocks=2):
        super().__init__()
        self.d = d
        self.corr_dim = corr_dim
        self.eta_freqs = eta_freqs
        self.eta_scale = eta_scale
        self.token_dim = 4 * eta_freqs + d + corr_dim + 1
        self.proj = nn.Linear(self.token_dim, hidden)
        self.point_blocks = nn.ModuleList(_Block(hidden, heads) for _ in range(blocks))
        self.time_blocks = nn.ModuleList(_Block(hidden, heads) for _ in range(blocks))
        self.norm = nn.LayerNorm(hidden)
        self.head_dx = nn.Linear(hidden, 2)
        self.head_dq = nn.Linear(hidden, d)
        self.vis = nn.Linear(d, 1)

    def zero_heads(self):
        for lin in (self.head_dx, self.head_dq):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        return self

    def forward(self, tokens, active):
        x = self.proj(tokens)  # (P, w, H)
        for pb, tb in zip(self.point_blocks, self.time_blocks):
            # across points at each slot
            xt = pb(x.transpose(0, 1), _key_mask(active.transpose(0, 1)))
            x = xt.transpose(0, 1)
            # across slots for each point
            x = tb(x, _key_mask(active))
        x = self.norm(x)
        return self.head_dx(x), self.head_dq(x)

    def visibility_logits(self, descriptors):
        return self.vis(descriptors).squeeze(-1)


class TrackerModel(nn.Module):
    """Encoder plus refiner with the hyperparameters they share."""

    def __init__(self, encoder: nn.Module, refiner: Refiner, radius: int = 3):
        super().__init__()
        self.encoder = encoder
        self.refiner = refiner
        self.radius = radius

    @property
    def stride(self):
        return self.encoder.cfg.stride

    @property
    def levels(self):
        return self.encoder.cfg.levels


def make_model(cfg, seed=None, dtype=torch.float32, zero_heads=False) -> TrackerModel:
    """Seeded model from a :class:`~etapkit.config.PipelineConfig`.

    ``zero_heads`` starts training from "nothing moves" predictions.
    """
    seed = cfg.seed if seed is None else seed
    enc_cfg = EncoderConfig(in_channels=cfg.bins, d=cfg.d, levels=cfg.levels, stride=cfg.k,
                            preset=cfg.encoder, width=cfg.encoder_width)
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        encoder = make_encoder(enc_cfg, seed=seed, dtype=dtype)
        refiner = Refiner(cfg.d, correlation_dim(cfg.levels, cfg.delta), cfg.eta_freqs,
                          cfg.eta_scale, cfg.hidden, cfg.heads, cfg.blocks).to(dtype)
    finally:
        torch.random.set_rng_state(state)
    if zero_heads:
        refiner.zero_heads()
    return TrackerModel(encoder, refiner, cfg.delta)


# ------------------------------------------------------------------ window ops


def initialize_window(queries, pyramids: FeaturePyramid, vis_init: float = 2.0,
                      offset: int = 0) -> TrackWindowState:
    """Broadcast every query to all slots of the window starting at ``offset``."""
    lv0 = pyramids.levels[0]
    w, d = lv0.shape[0], lv0.shape[1]
    dtype = lv0.dtype
    p = len(queries)
    pos = torch.zeros(p, w, 2, dtype=dtype)
    desc = torch.zeros(p, w, d, dtype=dtype)
    active = torch.zeros(p, w, dtype=torch.bool)
    for i, q in enumerate(queries):
        slot = q.t_index - offset
        if not 0 <= slot < w:
            raise QueryOutOfSchedule(f"query {i} at t_index {q.t_index} is outside the window")
        xy = torch.tensor([q.x, q.y], dtype=dtype)
        at = to_level(xy, pyramids.level_stride(0)).reshape(1, 1, 2)
        desc[i] = bilinear_sample(lv0[slot:slot + 1], at)[0, 0]
        pos[i] = xy
        active[i, slot:] = True
    logits = torch.full((p, w), float(vis_init), dtype=dtype)
    return TrackWindowState(pos, desc, logits, active)


def build_tokens(state: TrackWindowState, pyramids: FeaturePyramid, refiner: Refiner,
                 m: int = 0, radius: int = 3, detach_coords: bool = False) -> torch.Tensor:
    """Per-point, per-slot tokens ``(P, w, token_dim)``. ``m`` is the iteration index (unused)."""
    pos = state.positions
    look = pos.detach() if detach_coords else pos
    corr = correlation_lookup(state.descriptors.transpose(0, 1), pyramids,
                              look.transpose(0, 1), radius).transpose(0, 1)
    delta = pos - pos[:, :1]
    tokens = torch.cat([
        fourier_offsets(delta, refiner.eta_freqs, refiner.eta_scale),
        state.descriptors,
        corr,
        state.vis_logits.unsqueeze(-1),
    ], dim=-1)
    width = tokens.shape[-1]
    p, w = pos.shape[:2]
    slots = torch.arange(w, dtype=pos.dtype).expand(p, w)
    return tokens + sincos_2d(pos[:, :1].expand(-1, w, -1), width) + sincos(slots, width)


def refine_once(state: TrackWindowState, pyramids: FeaturePyramid, model: TrackerModel,
                m: int = 0, detach_coords: bool = False):
    """One refinement pass. Returns ``(dx, dQ, new_state)``."""
    tokens = build_tokens(state, pyramids, model.refiner, m, model.radius, detach_coords)
    dx, dq = model.refiner(tokens, state.active)
    mask = state.active.unsqueeze(-1).to(dx.dtype)
    dx = dx * mask
    dq = dq * mask
    if not (torch.isfinite(dx).all() and torch.isfinite(dq).all()):
        raise NonFiniteUpdate(f"non-finite refinement output at iteration {m}")
    new = replace(state, positions=state.positions + dx, descriptors=state.descriptors + dq,
                  iterations=state.iterations + [state.positions + dx])
    return dx, dq, new


def track_window(state: TrackWindowState, pyramids: FeaturePyramid, model: TrackerModel,
                 m_iters: int, detach_coords: bool = False) -> TrackWindowState:
    if m_iters < 1:
        raise ValueError("m_iters must be >= 1")
    if state.n_points == 0:
        return state
    for m in range(m_iters):
        _, _, state = refine_once(state, pyramids, model, m, detach_coords)
    logits = model.refiner.visibility_logits(state.descriptors)
    return replace(state, vis_logits=logits)


# ------------------------------------------------------------- sequence level


def window_offsets(n_steps: int, w: int, stride: int) -> list[int]:
    if n_steps < w:
        raise ValueError(f"schedule has {n_steps} steps, need at least the window size {w}")
    offsets = list(range(0, n_steps - w + 1, stride))
    if offsets[-1] != n_steps - w:
        offsets.append(n_steps - w)
    return offsets


def carry_state(prev: TrackWindowState, shift: int, started: torch.Tensor) -> TrackWindowState:
    """Shift a finished window by ``shift`` slots; new slots copy the last estimate."""
    w = prev.positions.shape[1]
    idx = torch.clamp(torch.arange(w) + shift, max=w - 1)
    active = started.unsqueeze(-1).expand(-1, w).clone()
    return TrackWindowState(prev.positions[:, idx], prev.descriptors[:, idx],
                            prev.vis_logits[:, idx], active)


def run_window(model: TrackerModel, pyramids: FeaturePyramid, queries, offset: int,
               m_iters: int, prev: TrackWindowState | None = None, prev_offset: int | None = None,
               vis_init: float = 2.0, detach_coords: bool = False) -> TrackWindowState:
    """Track all points started by the end of this window.

    Points queried before ``offset`` are taken over from ``prev`` (the state
    of the window at ``prev_offset``); points queried inside the window are
    broadcast-initialised. Rows of points that have not started are
    returned inactive and untouched.
    """
    w = pyramids.levels[0].shape[0]
    n = len(queries)
    t_idx = torch.tensor([q.t_index for q in queries], dtype=torch.long)
    fresh = (t_idx >= offset) & (t_idx < offset + w)
    carried = t_idx < offset
    if carried.any() and prev is None:
        raise QueryOutOfSchedule("points queried before the first window need a previous state")
    local = [QueryPoint(q.t_index if f else offset, q.x, q.y) for q, f in zip(queries, fresh.tolist())]
    state = initialize_window(local, pyramids, vis_init, offset) if n else initialize_window([], pyramids)
    if carried.any():
        cs = carry_state(prev, offset - prev_offset, carried)
        keep = carried.unsqueeze(-1)
        state = TrackWindowState(
            torch.where(keep.unsqueeze(-1), cs.positions, state.positions),
            torch.where(keep.unsqueeze(-1), cs.descriptors, state.descriptors),
            torch.where(keep, cs.vis_logits, state.vis_logits),
            torch.where(keep, cs.active, state.active),
        )
    started = fresh | carried
    state.active = state.active & started.unsqueeze(-1)
    sel = torch.nonzero(started).squeeze(-1)
    if sel.numel() == 0:
        return state
    sub = TrackWindowState(state.positions[sel], state.descriptors[sel], state.vis_logits[sel],
                           state.active[sel])
    sub = track_window(sub, pyramids, model, m_iters, detach_coords)
    pos = state.positions.index_copy(0, sel, sub.positions)
    desc = state.descriptors.index_copy(0, sel, sub.descriptors)
    logits = state.vis_logits.index_copy(0, sel, sub.vis_logits)
    iters = [state.positions.index_copy(0, sel, it) for it in sub.iterations]
    return TrackWindowState(pos, desc, logits, state.active, iters)


def track_pyramids(model: TrackerModel, pyramids: FeaturePyramid, queries, w: int = 8,
                   stride: int = 4, m_iters: int = 6, vis_init: float = 2.0):
    """Slide windows over a pyramid sequence; newest window wins on overlaps.

    Returns ``(positions (N, T, 2), vis_logits (N, T), valid (N, T))`` tensors.
    """
    n_steps = pyramids.levels[0].shape[0]
    for i, q in enumerate(queries):
        if not 0 <= q.t_index < n_steps:
            raise QueryOutOfSchedule(f"query {i} t_index {q.t_index} outside schedule of {n_steps}")
    n = len(queries)
    dtype = pyramids.levels[0].dtype
    positions = torch.zeros(n, n_steps, 2, dtype=dtype)
    logits = torch.zeros(n, n_steps, dtype=dtype)
    t_idx = torch.tensor([q.t_index for q in queries], dtype=torch.long).reshape(n)
    valid = torch.arange(n_steps).unsqueeze(0) >= t_idx.unsqueeze(1)
    prev, prev_off = None, None
    for off in window_offsets(n_steps, w, stride):
        state = run_window(model, pyramids[off:off + w], queries, off, m_iters, prev, prev_off,
                           vis_init)
        act = state.active
        positions[:, off:off + w] = torch.where(act.unsqueeze(-1), state.positions,
                                                positions[:, off:off + w])
        logits[:, off:off + w] = torch.where(act, state.vis_logits, logits[:, off:off + w])
        prev, prev_off = state, off
    return positions, logits, valid


def build_stacks(stream: EventStream, schedule_us, n_events: int, bins: int) -> StackBatch:
    stacks = []
    for i, t in enumerate(schedule_us):
        try:
            win = select_window(stream, int(t), n_events)
        except InsufficientEvents as exc:
            raise InsufficientEvents(f"timestep {i} (t={int(t)} us): {exc}") from exc
        stacks.append(build_event_stack(win, bins))
    return StackBatch(stacks)


def encode_schedule(model: TrackerModel, stream: EventStream, schedule_us, n_events: int,
                    bins: int) -> FeaturePyramid:
    batch = normalize_batch(build_stacks(stream, schedule_us, n_events, bins))
    dtype = next(model.parameters()).dtype
    return encode_tensor(stack_to_tensor(batch.array(), dtype), model.encoder)


def queries_from_times(query_rows, schedule_us):
    """Map ``(t_us, x, y)`` rows to the nearest scheduled timestep."""
    schedule_us = np.asarray(schedule_us, dtype=np.int64)
    out = []
    for t, x, y in query_rows:
        idx = int(np.argmin(np.abs(schedule_us - int(t))))
        out.append(QueryPoint(idx, float(x), float(y)))
    return out


def track_sequence(stream: EventStream, queries, schedule_us, cfg, model: TrackerModel,
                   m_iters: int | None = None) -> TrackSet:
    """Track ``queries`` through ``stream`` at the scheduled timestamps."""
    schedule_us = np.asarray(schedule_us, dtype=np.int64)
    if np.any(np.diff(schedule_us) < 0):
        raise ValueError("schedule must be sorted")
    m_iters = cfg.m_eval if m_iters is None else m_iters
    if not queries:
        return TrackSet.empty(schedule_us)
    with torch.no_grad():
        pyr = encode_schedule(model, stream, schedule_us, cfg.n_events, cfg.bins)
        pos, logits, valid = track_pyramids(model, pyr, queries, cfg.w, cfg.stride, m_iters,
                                            cfg.vis_init_logit)
    vis = torch.sigmoid(logits) > 0.5
    return TrackSet(pos.numpy().astype(np.float64), vis.numpy() & valid.numpy(), valid.numpy(),
                    schedule_us)
