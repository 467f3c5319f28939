"""Self-checks run by ``etapkit verify`` and ``etapkit grad-check``.

Each check compares a pipeline stage with a deliberately naive
re-implementation (per-pixel loops, nested sums, brute-force counting) on a
small random instance.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import PipelineConfig
from .events import EventStream, select_window
from .features import EncoderConfig, FeaturePyramid, build_pyramid, correlation_features, make_encoder
from .losses import (
    as_function_of_params,
    flat_params,
    grad_check,
    loss_fa,
    loss_track,
    loss_visibility,
)
from .metrics import average_jaccard, delta_avg, occlusion_accuracy
from .representation import build_event_stack
from .simulator import simulate_log_events
from .tracker import QueryPoint, Refiner, TrackerModel, initialize_window, track_window
from .tracks import TrackSet

GRAD_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name:<22s} {self.detail}"


# ------------------------------------------------------------- simulator


def dense_events(log_frames, ts, c_pos, c_neg):
    """Step every integer microsecond and fire while the level is a threshold away."""
    L = np.asarray(log_frames, dtype=np.float64)
    n, h, w = L.shape
    L = L.reshape(n, -1)
    base = L[0].copy()
    up = np.zeros(h * w, dtype=np.int64)
    down = np.zeros(h * w, dtype=np.int64)
    out = []
    for k in range(n - 1):
        a, b = L[k], L[k + 1]
        t0, t1 = float(ts[k]), float(ts[k + 1])
        for t in range(int(ts[k]) + 1, int(ts[k + 1]) + 1):
            level = a + (b - a) * ((float(t) - t0) / (t1 - t0))
            while True:
                ref = base + up * c_pos - down * c_neg
                fire_up = (level - ref) >= c_pos
                fire_dn = (level - ref) <= -c_neg
                if not (fire_up.any() or fire_dn.any()):
                    break
                for pix in np.nonzero(fire_up)[0]:
                    out.append((t, pix % w, pix // w, 1))
                for pix in np.nonzero(fire_dn)[0]:
                    out.append((t, pix % w, pix // w, -1))
                up += fire_up
                down += fire_dn
    return sorted(out)


def check_simulator(rng, n_seq=3, shape=(8, 8), n_frames=10, dt=200) -> CheckResult:
    for _ in range(n_seq):
        frames = rng.uniform(0.05, 1.0, size=(n_frames, *shape))
        L = np.log(frames + 1e-3)
        ts = np.arange(n_frames) * dt
        c = float(rng.uniform(0.16, 0.34))
        t, x, y, p = simulate_log_events(L, ts, c, c)
        got = sorted(zip(t.tolist(), x.astype(int).tolist(), y.astype(int).tolist(), p.tolist()))
        want = dense_events(L, ts, c, c)
        if got != want:
            return CheckResult("simulator", False, f"{len(got)} events vs {len(want)} from the dense oracle")
    return CheckResult("simulator", True, f"{n_seq} sequences identical to the dense oracle")


# ----------------------------------------------------------------- stacks


def check_stack(rng, n=2000, bins=10, size=24) -> CheckResult:
    m = n + 37
    t = np.sort(rng.integers(0, 10**6, m))
    x = rng.integers(0, size, m).astype(float)
    y = rng.integers(0, size, m).astype(float)
    p = rng.choice([-1, 1], m)
    stream = EventStream(size, size, t, x, y, p)
    stack = build_event_stack(select_window(stream, int(t[-1]), n), bins)
    for c in range(bins):
        k = n // 2 ** c
        want = np.zeros((size, size))
        for xi, yi, pi in zip(x[-k:], y[-k:], p[-k:]):
            want[int(yi), int(xi)] += pi
        if np.abs(stack.data[:, :, c] - want).max() > 1e-9:
            return CheckResult("stack", False, f"channel {c} differs from per-event accumulation")
    return CheckResult("stack", True, f"{bins} channels match per-event accumulation")


# ------------------------------------------------------------ correlation


def naive_correlation(q, levels, stride, pos, radius):
    """Nested loops over levels, offsets and the four bilinear neighbours."""
    out = []
    for lvl, fmap in enumerate(levels):
        s = stride * 2 ** lvl
        d, h, w = fmap.shape
        cx = (pos[0] + 0.5) / s - 0.5
        cy = (pos[1] + 0.5) / s - 0.5
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                px, py = cx + dx, cy + dy
                x0, y0 = int(np.floor(px)), int(np.floor(py))
                val = 0.0
                for xi, yi in ((x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)):
                    if 0 <= xi < w and 0 <= yi < h:
                        wgt = (1 - abs(px - xi)) * (1 - abs(py - yi))
                        val += wgt * sum(q[j] * fmap[j, yi, xi] for j in range(d))
                out.append(val)
    return np.array(out)


def check_correlation(rng, trials=10, d=8, size=32, levels=4, radius=3) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        lv1 = torch.from_numpy(rng.standard_normal((d, size // 4, size // 4)))
        pyr = build_pyramid(lv1, levels, 4)
        q = rng.standard_normal(d)
        pos = rng.uniform(-4, size + 4, 2)
        got = correlation_features(torch.from_numpy(q), pyr, torch.from_numpy(pos), radius).numpy()
        want = naive_correlation(q, [lv.numpy() for lv in pyr.levels], 4, pos, radius)
        if got.shape != want.shape:
            return CheckResult("correlation", False, f"length {got.shape[0]} != {want.shape[0]}")
        worst = max(worst, float(np.abs(got - want).max()))
    return CheckResult("correlation", worst <= 1e-6, f"max abs diff {worst:.2e}")


# ---------------------------------------------------------------- metrics


def enumerate_metrics(pred_pos, pred_vis, gt_pos, gt_vis, valid, thresholds, scale):
    """Entry-by-entry counting for position accuracy, occlusion accuracy and Jaccard."""
    n, t = valid.shape
    fractions, jaccards = [], []
    correct_flags = total_flags = 0
    for i, j in itertools.product(range(n), range(t)):
        if valid[i, j]:
            total_flags += 1
            correct_flags += int(pred_vis[i, j] == gt_vis[i, j])
    for thr in thresholds:
        hit = seen = tp = fp = fn = 0
        for i, j in itertools.product(range(n), range(t)):
            if not valid[i, j]:
                continue
            e = np.sqrt((pred_pos[i, j, 0] - gt_pos[i, j, 0]) ** 2 + (pred_pos[i, j, 1] - gt_pos[i, j, 1]) ** 2)
            close = e < thr * scale
            if gt_vis[i, j]:
                seen += 1
                hit += int(close)
            if pred_vis[i, j] and gt_vis[i, j] and close:
                tp += 1
            if pred_vis[i, j] and (not gt_vis[i, j] or not close):
                fp += 1
            if gt_vis[i, j] and (not pred_vis[i, j] or not close):
                fn += 1
        fractions.append(hit / seen)
        jaccards.append(tp / (tp + fp + fn) if tp + fp + fn else 1.0)
    return float(np.mean(fractions)), correct_flags / total_flags, float(np.mean(jaccards))


def check_metrics(rng) -> CheckResult:
    n, t = 3, 4
    gt_pos = rng.uniform(0, 64, (n, t, 2))
    pred_pos = gt_pos + rng.normal(0, 3, (n, t, 2))
    gt_vis = rng.random((n, t)) < 0.7
    gt_vis[:, 0] = True
    pred_vis = rng.random((n, t)) < 0.7
    valid = np.ones((n, t), dtype=bool)
    ts = np.arange(t) * 1000
    gt = TrackSet(gt_pos, gt_vis, valid, ts)
    pred = TrackSet(pred_pos, pred_vis, valid, ts)
    thr = (1, 2, 4, 8, 16)
    d, oa, aj = enumerate_metrics(pred_pos, pred_vis, gt_pos, gt_vis, valid, thr, 1.0)
    got = (delta_avg(pred, gt, thr)[1], occlusion_accuracy(pred, gt), average_jaccard(pred, gt, thr)[0])
    err = max(abs(a - b) for a, b in zip(got, (d, oa, aj)))
    return CheckResult("metrics", err <= 1e-12, f"max diff {err:.1e}")


# ------------------------------------------------------------- gradients


class ToyLossModule(nn.Module):
    """A tiny float64 tracker plus fixed inputs; ``forward`` returns one loss."""

    def __init__(self, seed=0, which="total"):
        super().__init__()
        self.which = which
        g = torch.Generator().manual_seed(seed)
        enc_cfg = EncoderConfig(in_channels=2, d=4, levels=2, stride=4, preset="toy", width=4)
        encoder = make_encoder(enc_cfg, seed=seed, dtype=torch.float64)
        refiner = Refiner(d=4, corr_dim=2 * 9, eta_freqs=2, eta_scale=8.0, hidden=8, heads=2,
                          blocks=1).to(torch.float64)
        self.model = TrackerModel(encoder, refiner, radius=1)
        with torch.no_grad():
            for p in self.model.parameters():
                p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
        self.w, self.size = 3, 16
        self.register_buffer("x_fwd", torch.randn(self.w, 2, self.size, self.size, generator=g, dtype=torch.float64))
        self.register_buffer("x_inv", torch.randn(self.w, 2, self.size, self.size, generator=g, dtype=torch.float64))
        self.register_buffer("gt", 4 + 8 * torch.rand(2, self.w, 2, generator=g, dtype=torch.float64))
        self.register_buffer("vis", torch.rand(2, self.w, generator=g) < 0.6)
        self.queries = [QueryPoint(0, float(self.gt[0, 0, 0]), float(self.gt[0, 0, 1])),
                        QueryPoint(1, float(self.gt[1, 1, 0]), float(self.gt[1, 1, 1]))]
        valid = torch.zeros(2, self.w, dtype=torch.bool)
        valid[0, 0:] = True
        valid[1, 1:] = True
        self.register_buffer("valid", valid)

    def _pyr(self, x) -> FeaturePyramid:
        cfg = self.model.encoder.cfg
        return build_pyramid(self.model.encoder(x), cfg.levels, cfg.stride)

    def parts(self, need=("l_track", "l_vis", "l_fa")):
        zero = self.gt.new_zeros(())
        l_track = l_vis = l_fa = zero
        pyr = self._pyr(self.x_fwd)
        if "l_track" in need or "l_vis" in need:
            state = initialize_window(self.queries, pyr, 2.0)
            state = track_window(state, pyr, self.model, 2, detach_coords=False)
            l_track = loss_track(state.iterations, self.gt, self.valid)
            l_vis = loss_visibility(state.vis_logits, self.vis, self.valid)
        if "l_fa" in need:
            l_fa = loss_fa(pyr, self._pyr(self.x_inv), self.gt, 90, self.size, self.size)
        return l_track, l_vis, l_fa

    def forward(self):
        if self.which == "total":
            l_track, l_vis, l_fa = self.parts()
            return 0.1 * l_track + l_vis + 0.1 * l_fa
        parts = dict(zip(("l_track", "l_vis", "l_fa"), self.parts((self.which,))))
        return parts[self.which]


def _scaled_grad(fn, scale: float):
    def grad_fn(p):
        x = p.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(fn(x), x)
        return g * scale
    return grad_fn


def gradient_errors(seed=0, epsilon=1e-4, fault: float = 0.0, names=("l_track", "l_vis", "l_fa", "total"),
                    sample: int = 0):
    """Max relative finite-difference error per loss on the toy model.

    ``fault`` scales the analytic gradient by ``1 + fault`` to emulate a
    broken backward pass. ``sample > 0`` checks that many randomly chosen
    parameters instead of all of them.
    """
    out = {}
    for name in names:
        mod = ToyLossModule(seed, name)
        fn = as_function_of_params(mod)
        p0 = flat_params(mod)
        grad_fn = _scaled_grad(fn, 1.0 + fault) if fault else None
        idx = None
        if sample:
            idx = np.random.default_rng(seed).choice(p0.numel(), size=min(sample, p0.numel()), replace=False)
        out[name] = grad_check(fn, p0, epsilon, grad_fn, indices=idx)
    return out


def check_gradients(seed=0, fault: float = 0.0, sample: int = 0) -> CheckResult:
    errs = gradient_errors(seed, fault=fault, sample=sample)
    ok = all(v < GRAD_TOLERANCE for v in errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    return CheckResult("gradients", ok, f"max rel err: {detail}")


# ------------------------------------------------------------------ suite


def run_suite(cfg: PipelineConfig | None = None, include_gradients: bool = True, fault: float = 0.0,
              grad_sample: int = 0):
    cfg = cfg or PipelineConfig()
    rng = np.random.default_rng(cfg.seed)
    checks = [
        lambda: check_simulator(rng),
        lambda: check_stack(rng, bins=cfg.bins),
        lambda: check_correlation(rng, levels=cfg.levels, radius=cfg.delta),
        lambda: check_metrics(rng),
    ]
    if include_gradients:
        checks.append(lambda: check_gradients(cfg.seed, fault, grad_sample))
    results = []
    for check in checks:
        start = time.perf_counter()
        res = check()
        res.seconds = time.perf_counter() - start
        results.append(res)
    return results
