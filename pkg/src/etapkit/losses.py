"""Training losses and a finite-difference gradient checker."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import EmptyMask, NonFinitePart, ZeroNormDescriptor
from .events import rotate_points
from .features import FeaturePyramid, bilinear_sample, to_level

TRACK_WEIGHT = 0.1
VIS_WEIGHT = 1.0
FA_WEIGHT = 0.1
ITER_DECAY = 0.8
LOGIT_CLAMP = 30.0
ZERO_NORM = 1e-12


@dataclass
class LossBreakdown:
    l_track: float
    l_vis: float
    l_fa: float
    total: float

    def as_row(self) -> list:
        return [float(self.l_track), float(self.l_vis), float(self.l_fa), float(self.total)]


def _mask_count(valid_mask):
    n = valid_mask.sum()
    if int(n) == 0:
        raise EmptyMask("no valid entries")
    return n


def loss_track(preds_per_iteration, gt, valid_mask, norm: str = "l1"):
    """``sum_m 0.8**(M-m) * mean_valid |pred_m - gt|``.

    ``preds_per_iteration``: sequence of ``(..., 2)`` position tensors for
    ``m = 1..M``. ``norm="l2"`` swaps in the Euclidean distance.
    """
    valid = valid_mask.to(gt.dtype)
    n = _mask_count(valid_mask)
    m_total = len(preds_per_iteration)
    loss = 0.0
    for m, pred in enumerate(preds_per_iteration, start=1):
        diff = pred - gt
        if norm == "l1":
            err = diff.abs().sum(-1)
        elif norm == "l2":
            err = diff.pow(2).sum(-1).clamp_min(1e-12).sqrt()
        else:
            raise ValueError(f"unknown norm {norm!r}")
        loss = loss + ITER_DECAY ** (m_total - m) * (err * valid).sum() / n
    return loss


def loss_visibility(logits, gt_flags, valid_mask):
    """Mean binary cross-entropy on clamped logits over valid entries."""
    n = _mask_count(valid_mask)
    z = logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    y = gt_flags.to(z.dtype)
    # log(1 + exp(-|z|)) form is stable for either sign
    bce = torch.clamp(z, min=0) - z * y + torch.log1p(torch.exp(-z.abs()))
    return (bce * valid_mask.to(z.dtype)).sum() / n


def unitize(v):
    norm = v.norm(dim=-1, keepdim=True)
    if bool((norm < ZERO_NORM).any()):
        raise ZeroNormDescriptor("descriptor with (near) zero norm")
    return v / norm


def alignment_penalty(d, d_inv):
    """``(1 - <u(d), u(d_inv)>)**2`` per pair."""
    return (1.0 - (unitize(d) * unitize(d_inv)).sum(-1)) ** 2


def sample_aligned_pairs(pyr_fwd: FeaturePyramid, pyr_inv: FeaturePyramid, gt, theta: int,
                         width: int, height: int):
    """Descriptors of the same physical points in both branches.

    ``pyr_*`` level maps are ``(w, d, h, w_)``; ``gt`` is ``(P, w, 2)``. Slot
    ``s`` of the forward branch pairs with slot ``w-1-s`` of the inverted
    branch, sampled at the rotated ground-truth position. Returns two
    ``(P, w, d)`` tensors.
    """
    lv_f = pyr_fwd.levels[0]
    lv_i = pyr_inv.levels[0]
    stride = pyr_fwd.level_stride(0)
    gt_t = gt.transpose(0, 1)  # (w, P, 2)
    d = bilinear_sample(lv_f, to_level(gt_t, stride))
    rx, ry, _, _ = rotate_points(gt_t[..., 0].detach().cpu().numpy(), gt_t[..., 1].detach().cpu().numpy(),
                                 width, height, theta)
    rot = torch.as_tensor(np.stack([rx, ry], -1), dtype=gt.dtype)
    d_inv = bilinear_sample(lv_i.flip(0), to_level(rot, stride))
    return d.transpose(0, 1), d_inv.transpose(0, 1)


def loss_fa(pyramids_forward, pyramids_inverted, gt_tracks, theta, width, height, masks=None):
    """Feature-alignment loss summed over windows.

    Each window contributes ``sum_{i,s} (1 - cos)**2 / |P_t|``. The three
    sequence arguments hold one entry per window; ``theta`` is a single
    quarter turn or one per window. ``masks`` (``(P, w)`` bool per window)
    drop pairs, e.g. points outside the frame.
    """
    if isinstance(pyramids_forward, FeaturePyramid):
        pyramids_forward, pyramids_inverted, gt_tracks = [pyramids_forward], [pyramids_inverted], [gt_tracks]
        masks = None if masks is None else [masks]
    thetas = theta if isinstance(theta, (list, tuple)) else [theta] * len(gt_tracks)
    total = 0.0
    for k, (pf, pi, gt) in enumerate(zip(pyramids_forward, pyramids_inverted, gt_tracks)):
        d, d_inv = sample_aligned_pairs(pf, pi, gt, thetas[k], width, height)
        if masks is not None and masks[k] is not None:
            m = masks[k]
            n_points = int(m.any(dim=1).sum())
            if n_points == 0:
                continue
            total = total + alignment_penalty(d[m], d_inv[m]).sum() / n_points
        else:
            total = total + alignment_penalty(d, d_inv).sum() / gt.shape[0]
    return total


def total_loss(l_track, l_vis, l_fa) -> LossBreakdown:
    for name, v in (("l_track", l_track), ("l_vis", l_vis), ("l_fa", l_fa)):
        if not math.isfinite(float(v)):
            raise NonFinitePart(f"{name} is not finite")
    total = TRACK_WEIGHT * l_track + VIS_WEIGHT * l_vis + FA_WEIGHT * l_fa
    return LossBreakdown(l_track, l_vis, l_fa, total)


def grad_check(scalar_fn, params, epsilon: float = 1e-4, grad_fn=None, indices=None) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``params`` is a 1-D float64 tensor; ``scalar_fn`` maps it to a scalar
    tensor. The analytic gradient comes from ``grad_fn`` if given, else
    autograd. Relative error uses ``max(|g|, 1e-6)`` as denominator.
    ``indices`` restricts the finite differences to some coordinates.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    p = params.detach().clone().to(torch.float64)
    if grad_fn is None:
        x = p.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(scalar_fn(x), x)
    else:
        g = torch.as_tensor(grad_fn(p.clone()), dtype=torch.float64)
    g = g.detach().reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in (range(p.numel()) if indices is None else [int(j) for j in indices]):
            up = p.clone()
            up[i] += epsilon
            dn = p.clone()
            dn[i] -= epsilon
            fd = (float(scalar_fn(up)) - float(scalar_fn(dn))) / (2 * epsilon)
            rel = abs(fd - float(g[i])) / max(abs(float(g[i])), 1e-6)
            worst = max(worst, rel)
    return worst


def flat_params(module: torch.nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def as_function_of_params(module: torch.nn.Module, *args):
    """``flat -> module(*args)`` with the module's parameters replaced by ``flat``."""
    layout = [(name, p.shape, p.numel()) for name, p in module.named_parameters()]

    def scalar(flat):
        params, i = {}, 0
        for name, shape, n in layout:
            params[name] = flat[i:i + n].reshape(shape)
            i += n
        return torch.func.functional_call(module, params, args)

    return scalar
