"""Convolutional encoder, feature pyramids, bilinear lookups and correlation features.

Feature maps are channel-first torch tensors, ``(..., d, h, w)``. Positions are
``(x, y)`` pairs. Full-resolution pixel coordinates map to level coordinates
with pixel centres aligned, ``(x + 0.5) / s - 0.5`` for a level of stride
``s = k * 2**(level - 1)``, which is what average pooling implies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch

DEFAULT_D = 128
DEFAULT_LEVELS = 4
DEFAULT_STRIDE = 4
DEFAULT_RADIUS = 3


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 10
    d: int = DEFAULT_D
    levels: int = DEFAULT_LEVELS
    stride: int = DEFAULT_STRIDE
    preset: str = "toy"
    width: int = 64

    @property
    def multiple(self) -> int:
        return self.stride * 2 ** (self.levels - 1)


class _ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return F.gelu(x + self.conv2(F.gelu(self.conv1(x))))


class Encoder(nn.Module):
    """Maps ``(N, B, H, W)`` stacks to stride-``k`` features ``(N, d, H/k, W/k)``.

    ``toy``: four convolutions (two of them stride 2). ``full``: the same
    stem plus residual blocks at each resolution.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        if cfg.stride != 4:
            raise ValueError("the encoder presets implement stride 4")
        self.cfg = cfg
        c = cfg.width
        if cfg.preset == "toy":
            self.net = nn.Sequential(
                nn.Conv2d(cfg.in_channels, c // 2, 3, padding=1), nn.GELU(),
                nn.Conv2d(c // 2, c, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(c, c, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(c, cfg.d, 1),
            )
        elif cfg.preset == "full":
            self.net = nn.Sequential(
                nn.Conv2d(cfg.in_channels, c // 2, 7, padding=3), nn.GELU(),
                _ResBlock(c // 2),
                nn.Conv2d(c // 2, c, 3, stride=2, padding=1), nn.GELU(),
                _ResBlock(c),
                nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.GELU(),
                _ResBlock(2 * c), _ResBlock(2 * c),
                nn.Conv2d(2 * c, cfg.d, 1),
            )
        else:
            raise ValueError(f"unknown encoder preset {cfg.preset!r}")

    @property
    def final(self) -> nn.Conv2d:
        return self.net[-1]

    def zero_final(self):
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)
        return self

    def forward(self, x):
        return self.net(x)


def make_encoder(cfg: EncoderConfig = EncoderConfig(), seed: int = 0, dtype=torch.float32) -> Encoder:
    """Deterministically initialised encoder."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        enc = Encoder(cfg).to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    return enc


class PoolEncoder(nn.Module):
    """Test stub: per-channel average pooling by the stride (identity features)."""

    def __init__(self, in_channels, stride=DEFAULT_STRIDE, levels=DEFAULT_LEVELS):
        super().__init__()
        self.cfg = EncoderConfig(in_channels=in_channels, d=in_channels, levels=levels,
                                 stride=stride, preset="pool")

    def forward(self, x):
        return F.avg_pool2d(x, self.cfg.stride)


@dataclass
class FeaturePyramid:
    """Multi-scale features; ``levels[l]`` has shape ``(..., d, H/(k*2**l), W/(k*2**l))``."""

    levels: list
    stride: int = DEFAULT_STRIDE

    @property
    def d(self) -> int:
        return self.levels[0].shape[-3]

    def level_stride(self, level: int) -> int:
        return self.stride * 2 ** level

    def __getitem__(self, idx):
        """Select leading (time) entries from every level."""
        return FeaturePyramid([lv[idx] for lv in self.levels], self.stride)


def stack_to_tensor(stack_data, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, B)`` or ``(T, H, W, B)`` array to channel-first tensor."""
    arr = np.asarray(stack_data)
    t = torch.as_tensor(np.ascontiguousarray(np.moveaxis(arr, -1, -3)), dtype=dtype)
    return t


def pad_to_multiple(x: torch.Tensor, multiple: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x


def build_pyramid(level1: torch.Tensor, levels: int = DEFAULT_LEVELS,
                  stride: int = DEFAULT_STRIDE) -> FeaturePyramid:
    out = [level1]
    for _ in range(levels - 1):
        prev = out[-1]
        lead = prev.shape[:-3]
        pooled = F.avg_pool2d(prev.reshape(-1, *prev.shape[-3:]), 2)
        out.append(pooled.reshape(*lead, *pooled.shape[-3:]))
    return FeaturePyramid(out, stride)


def encode_tensor(x: torch.Tensor, encoder: nn.Module) -> FeaturePyramid:
    """Encode ``(..., B, H, W)`` input; leading dims are flattened into a batch."""
    cfg = encoder.cfg
    if x.shape[-3] != cfg.in_channels:
        raise ShapeMismatch(f"encoder expects {cfg.in_channels} bins, got {x.shape[-3]}")
    lead = x.shape[:-3]
    x = pad_to_multiple(x.reshape(-1, *x.shape[-3:]), cfg.multiple)
    feats = encoder(x)
    feats = feats.reshape(*lead, *feats.shape[-3:])
    return build_pyramid(feats, cfg.levels, cfg.stride)


def encode(stack, encoder: nn.Module) -> FeaturePyramid:
    """Encode one :class:`~etapkit.representation.EventStack` (or ``(H, W, B)`` array)."""
    data = getattr(stack, "data", stack)
    if np.ndim(data) != 3:
        raise ShapeMismatch("expected a single (H, W, B) stack")
    dtype = next(encoder.parameters(), torch.zeros(0)).dtype
    return encode_tensor(stack_to_tensor(data, dtype), encoder)


def to_level(pos: torch.Tensor, stride: int) -> torch.Tensor:
    return (pos + 0.5) / stride - 0.5


def from_level(pos: torch.Tensor, stride: int) -> torch.Tensor:
    return (pos + 0.5) * stride - 0.5


def bilinear_sample(fmap: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """Sample ``fmap`` ``(N, d, h, w)`` at ``pos`` ``(N, P, 2)`` -> ``(N, P, d)``.

    Out-of-range neighbours contribute zeros. Differentiable in both inputs.
    """
    n, d, h, w = fmap.shape
    flat = fmap.reshape(n, d, h * w).transpose(1, 2)  # (N, hw, d)
    x, y = pos[..., 0], pos[..., 1]
    x0 = torch.floor(x.detach())
    y0 = torch.floor(y.detach())
    fx = x - x0
    fy = y - y0
    out = 0.0
    for dx, dy, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = (x0 + dx).long()
        yi = (y0 + dy).long()
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1))
        vals = torch.gather(flat, 1, idx.unsqueeze(-1).expand(-1, -1, d))
        out = out + vals * (wgt * inside.to(wgt.dtype)).unsqueeze(-1)
    return out


def sample_bilinear(level_map: torch.Tensor, pos) -> torch.Tensor:
    """Descriptor at one continuous position of a single ``(d, h, w)`` map."""
    pos = torch.as_tensor(pos, dtype=level_map.dtype).reshape(1, 1, 2)
    return bilinear_sample(level_map.unsqueeze(0), pos)[0, 0]


def patch_offsets(radius: int, dtype=torch.float32) -> torch.Tensor:
    """``(2r+1)**2`` integer offsets ``(dx, dy)``, row-major (``dy`` outer, ``dx`` inner)."""
    r = torch.arange(-radius, radius + 1, dtype=dtype)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([dx.reshape(-1), dy.reshape(-1)], dim=-1)


def correlation_lookup(q: torch.Tensor, pyramid: FeaturePyramid, pos: torch.Tensor,
                       radius: int = DEFAULT_RADIUS) -> torch.Tensor:
    """Batched correlation features.

    ``q`` ``(N, P, d)``, pyramid levels ``(N, d, h, w)``, ``pos`` ``(N, P, 2)`` in
    full-resolution pixels. Returns ``(N, P, S * (2r+1)**2)``.
    """
    offs = patch_offsets(radius, pos.dtype)  # (K, 2)
    n, p, _ = pos.shape
    k = offs.shape[0]
    out = []
    for lvl, fmap in enumerate(pyramid.levels):
        # sampling is linear, so correlate with the whole map first and sample scalars
        h, w = fmap.shape[-2:]
        corr = torch.einsum("npd,ndhw->nphw", q, fmap).reshape(n * p, 1, h, w)
        centre = to_level(pos, pyramid.level_stride(lvl))
        pts = (centre.unsqueeze(2) + offs).reshape(n * p, k, 2)
        out.append(bilinear_sample(corr, pts).reshape(n, p, k))
    return torch.cat(out, dim=-1)


def correlation_features(q, pyramid: FeaturePyramid, pos, radius: int = DEFAULT_RADIUS) -> torch.Tensor:
    """Correlation vector of one descriptor against a single-timestep pyramid."""
    lv0 = pyramid.levels[0]
    q = torch.as_tensor(q, dtype=lv0.dtype).reshape(1, 1, -1)
    pos = torch.as_tensor(pos, dtype=lv0.dtype).reshape(1, 1, 2)
    batched = FeaturePyramid([lv.unsqueeze(0) for lv in pyramid.levels], pyramid.stride)
    return correlation_lookup(q, batched, pos, radius)[0, 0]


def correlation_dim(levels: int = DEFAULT_LEVELS, radius: int = DEFAULT_RADIUS) -> int:
    return levels * (2 * radius + 1) ** 2
