import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from etapkit.errors import EmptyMask, NonFinitePart, ZeroNormDescriptor
from etapkit.events import rotate_points
from etapkit.features import build_pyramid
from etapkit.losses import (
    alignment_penalty,
    grad_check,
    loss_fa,
    loss_track,
    loss_visibility,
    sample_aligned_pairs,
    total_loss,
)
from etapkit.verify import gradient_errors

from oracles import bce_by_loops, fa_term, track_loss_by_loops


def test_track_loss_trivial_values():
    gt = torch.zeros(2, 3, 2)
    valid = torch.ones(2, 3, dtype=torch.bool)
    assert loss_track([gt, gt], gt, valid) == 0
    off = gt.clone()
    off[..., 0] = 1.0
    assert loss_track([off, off], gt, valid).item() == pytest.approx(1.8)
    with pytest.raises(EmptyMask):
        loss_track([gt], gt, torch.zeros_like(valid))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_track_loss_matches_loops(seed, m):
    rng = np.random.default_rng(seed)
    gt = rng.normal(0, 5, (4, 6, 2))
    preds = [gt + rng.normal(0, 2, gt.shape) for _ in range(m)]
    valid = rng.random((4, 6)) < 0.7
    valid[0, 0] = True
    got = loss_track([torch.as_tensor(p) for p in preds], torch.as_tensor(gt), torch.as_tensor(valid)).item()
    assert abs(got - track_loss_by_loops(preds, gt, valid)) < 1e-9


def test_track_loss_permutation_and_monotonicity():
    rng = np.random.default_rng(1)
    gt = torch.as_tensor(rng.normal(0, 3, (5, 4, 2)))
    pred = gt + torch.as_tensor(rng.normal(0, 1, (5, 4, 2)))
    valid = torch.ones(5, 4, dtype=torch.bool)
    perm = torch.tensor([3, 1, 4, 0, 2])
    base = loss_track([pred], gt, valid)
    assert torch.isclose(base, loss_track([pred[perm]], gt[perm], valid[perm]))
    bigger = pred.clone()
    bigger[2, 1, 0] += 0.5 * torch.sign(pred[2, 1, 0] - gt[2, 1, 0])
    assert loss_track([bigger], gt, valid) > base


def test_visibility_loss_values():
    valid = torch.ones(3, dtype=torch.bool)
    assert loss_visibility(torch.full((3,), 1e6), torch.ones(3, dtype=torch.bool), valid).item() < 1e-12
    for flags in (torch.zeros(3, dtype=torch.bool), torch.ones(3, dtype=torch.bool)):
        assert loss_visibility(torch.zeros(3, dtype=torch.float64), flags, valid).item() == pytest.approx(math.log(2))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_visibility_loss_matches_loops(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 20, (4, 5))
    y = rng.random((4, 5)) < 0.5
    valid = rng.random((4, 5)) < 0.8
    valid[0, 0] = True
    got = loss_visibility(torch.as_tensor(z), torch.as_tensor(y), torch.as_tensor(valid)).item()
    assert abs(got - bce_by_loops(z, y, valid)) < 1e-9


def test_alignment_penalty_trivial_values():
    e = torch.eye(3, dtype=torch.float64)
    assert alignment_penalty(e, e).tolist() == [0.0, 0.0, 0.0]
    assert alignment_penalty(e, e.roll(1, 0)).tolist() == [1.0, 1.0, 1.0]
    assert alignment_penalty(e, -e).tolist() == [4.0, 4.0, 4.0]
    with pytest.raises(ZeroNormDescriptor):
        alignment_penalty(torch.zeros(1, 3), e[:1])


def fa_fixture(seed, theta, size=32, d=5, w=4, p=3):
    """Forward maps plus inverted maps built by rotating and time-reversing them."""
    g = torch.Generator().manual_seed(seed)
    lv = torch.randn(w, d, size // 4, size // 4, generator=g, dtype=torch.float64)
    fwd = build_pyramid(lv, 2, 4)
    inv_lv = torch.rot90(lv, theta // 90, dims=(2, 3)).flip(0).contiguous()
    inv = build_pyramid(inv_lv, 2, 4)
    # level-1 cell centres, so the rotated positions also land on cell centres
    cells = torch.randint(0, size // 4, (p, w, 2), generator=g).to(torch.float64)
    gt = cells * 4 + 1.5
    return fwd, inv, gt, lv


@pytest.mark.parametrize("theta", [0, 90, 180, 270])
def test_fa_loss_zero_for_matching_branches(theta):
    fwd, inv, gt, _ = fa_fixture(0, theta)
    assert loss_fa(fwd, inv, gt, theta, 32, 32).item() < 1e-20


def test_fa_loss_matches_per_term_oracle():
    fwd, _, gt, lv = fa_fixture(1, 90)
    other = build_pyramid(torch.randn(lv.shape, generator=torch.Generator().manual_seed(9), dtype=torch.float64), 2, 4)
    got = loss_fa(fwd, other, gt, 90, 32, 32).item()
    ref = 0.0
    p, w = gt.shape[:2]
    for i in range(p):
        for s in range(w):
            x, y = gt[i, s].tolist()
            cx, cy = int((x + 0.5) / 4 - 0.5), int((y + 0.5) / 4 - 0.5)
            rx, ry, _, _ = rotate_points(x, y, 32, 32, 90)
            rcx, rcy = int((float(rx) + 0.5) / 4 - 0.5), int((float(ry) + 0.5) / 4 - 0.5)
            ref += fa_term(lv[s, :, cy, cx].numpy(), other.levels[0][w - 1 - s, :, rcy, rcx].numpy())
    assert got == pytest.approx(ref / p, abs=1e-12)


def test_fa_loss_scale_invariance_and_bounds():
    fwd, _, gt, lv = fa_fixture(2, 180)
    g = torch.Generator().manual_seed(3)
    other = build_pyramid(torch.randn(lv.shape, generator=g, dtype=torch.float64), 2, 4)
    base = loss_fa(fwd, other, gt, 180, 32, 32)
    scaled = loss_fa(build_pyramid(3.7 * lv, 2, 4), other, gt, 180, 32, 32)
    assert abs(base.item() - scaled.item()) <= 1e-9
    p, w = gt.shape[:2]
    assert 0 <= base.item() <= 4 * p * w / p


def test_fa_pairs_use_reversed_slots():
    fwd, inv, gt, _ = fa_fixture(4, 270)
    d, d_inv = sample_aligned_pairs(fwd, inv, gt, 270, 32, 32)
    assert torch.allclose(d, d_inv)


def test_total_loss():
    assert total_loss(1, 1, 1).total == pytest.approx(1.2)
    assert total_loss(0, 0, 0).total == 0
    with pytest.raises(NonFinitePart):
        total_loss(float("nan"), 0, 0)


def test_grad_check_quadratic():
    a = torch.tensor([[2.0, 0.5], [0.5, 1.0]], dtype=torch.float64)

    def f(p):
        return p @ a @ p + p.sum()

    assert grad_check(f, torch.tensor([0.3, -1.2], dtype=torch.float64)) < 1e-8
    with pytest.raises(ValueError):
        grad_check(f, torch.zeros(2), epsilon=0)


def test_grad_check_detects_wrong_gradient():
    def f(p):
        return (p ** 3).sum()

    p = torch.tensor([0.5, 1.5], dtype=torch.float64)
    assert grad_check(f, p, grad_fn=lambda q: 3 * q ** 2 * 1.01) > 5e-3


def test_fa_gradient_small_pyramid():
    g = torch.Generator().manual_seed(5)
    inv = build_pyramid(torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64), 2, 4)
    gt = torch.tensor([[[5.0, 6.0], [7.2, 3.3]], [[9.1, 10.4], [2.5, 12.0]]], dtype=torch.float64)

    def f(flat):
        return loss_fa(build_pyramid(flat.reshape(2, 3, 4, 4), 2, 4), inv, gt, 90, 16, 16)

    assert grad_check(f, torch.randn(96, generator=g, dtype=torch.float64)) < 1e-4


def test_toy_model_gradients_on_a_subset():
    errs = gradient_errors(seed=0, sample=40)
    assert all(v < 1e-3 for v in errs.values()), errs
