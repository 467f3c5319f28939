"""Reference implementations written independently of the package, for tests only.

Everything here favours obviousness over speed: explicit loops, no shared
helpers with the code under test.
"""

from __future__ import annotations

import math

import numpy as np


def dense_integrator(frames, ts_us, c_pos, c_neg, log_eps=1e-3):
    """Per-pixel event generation, one integer microsecond at a time.

    Returns a sorted list of ``(t, x, y, p)``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n, h, w = frames.shape
    logs = np.log(frames + log_eps)
    events = []
    for yy in range(h):
        for xx in range(w):
            start = logs[0, yy, xx]
            ups = downs = 0
            for k in range(n - 1):
                lo, hi = logs[k, yy, xx], logs[k + 1, yy, xx]
                ta, tb = float(ts_us[k]), float(ts_us[k + 1])
                for t in range(int(ts_us[k]) + 1, int(ts_us[k + 1]) + 1):
                    level = lo + (hi - lo) * ((float(t) - ta) / (tb - ta))
                    while level - (start + ups * c_pos - downs * c_neg) >= c_pos:
                        events.append((t, xx, yy, 1))
                        ups += 1
                    while level - (start + ups * c_pos - downs * c_neg) <= -c_neg:
                        events.append((t, xx, yy, -1))
                        downs += 1
    return sorted(events)


def stack_by_loops(xs, ys, ps, width, height, bins):
    """Mixed-density stack: channel c (0-based) sums the newest n // 2**c events, bilinearly."""
    n = len(xs)
    out = np.zeros((height, width, bins))
    for c in range(bins):
        k = n // 2 ** c
        for i in range(n - k, n):
            x, y, p = xs[i], ys[i], ps[i]
            x0, y0 = math.floor(x), math.floor(y)
            for xi in (x0, x0 + 1):
                for yi in (y0, y0 + 1):
                    wx = 1 - abs(x - xi)
                    wy = 1 - abs(y - yi)
                    if wx > 0 and wy > 0 and 0 <= xi < width and 0 <= yi < height:
                        out[yi, xi, c] += p * wx * wy
    return out


def correlation_by_loops(q, levels, base_stride, x, y, radius):
    """Correlation vector from explicit per-offset, per-corner, per-channel sums.

    ``levels``: list of ``(d, h, w)`` arrays; level ``l`` has stride
    ``base_stride * 2**l`` and pixel centres are aligned across levels.
    """
    vals = []
    for lvl, fmap in enumerate(levels):
        s = base_stride * 2 ** lvl
        d, h, w = fmap.shape
        cx, cy = (x + 0.5) / s - 0.5, (y + 0.5) / s - 0.5
        for oy in range(-radius, radius + 1):
            for ox in range(-radius, radius + 1):
                px, py = cx + ox, cy + oy
                acc = 0.0
                for xi in (math.floor(px), math.floor(px) + 1):
                    for yi in (math.floor(py), math.floor(py) + 1):
                        if not (0 <= xi < w and 0 <= yi < h):
                            continue
                        wgt = (1 - abs(px - xi)) * (1 - abs(py - yi))
                        for j in range(d):
                            acc += wgt * q[j] * fmap[j, yi, xi]
                vals.append(acc)
    return np.array(vals)


def track_loss_by_loops(preds, gt, valid):
    m_total = len(preds)
    n_valid = sum(1 for v in np.ravel(valid) if v)
    total = 0.0
    for m, pred in enumerate(preds, start=1):
        acc = 0.0
        for idx in np.ndindex(valid.shape):
            if valid[idx]:
                acc += abs(pred[idx][0] - gt[idx][0]) + abs(pred[idx][1] - gt[idx][1])
        total += 0.8 ** (m_total - m) * acc / n_valid
    return total


def bce_by_loops(logits, flags, valid):
    acc, n = 0.0, 0
    for idx in np.ndindex(valid.shape):
        if not valid[idx]:
            continue
        z = min(max(float(logits[idx]), -30.0), 30.0)
        # -log(sigmoid(s)) for s = z (positive label) or s = -z (negative label)
        s = z if flags[idx] else -z
        acc += math.log1p(math.exp(-s)) if s >= 0 else -s + math.log1p(math.exp(s))
        n += 1
    return acc / n


def fa_term(a, b):
    cos = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return (1.0 - cos) ** 2


def tap_by_enumeration(pred_pos, pred_vis, gt_pos, gt_vis, valid, thresholds, scale=1.0):
    """Position accuracy, occlusion accuracy and average Jaccard by explicit counting."""
    n, t = valid.shape
    entries = [(i, j) for i in range(n) for j in range(t) if valid[i, j]]
    oa = sum(pred_vis[i, j] == gt_vis[i, j] for i, j in entries) / len(entries)
    fracs, jacs = [], []
    for thr in thresholds:
        within = {e: math.dist(pred_pos[e], gt_pos[e]) < thr * scale for e in entries}
        vis_entries = [e for e in entries if gt_vis[e]]
        fracs.append(sum(within[e] for e in vis_entries) / len(vis_entries))
        tp = sum(1 for e in entries if pred_vis[e] and gt_vis[e] and within[e])
        fp = sum(1 for e in entries if pred_vis[e] and (not gt_vis[e] or not within[e]))
        fn = sum(1 for e in entries if gt_vis[e] and (not pred_vis[e] or not within[e]))
        jacs.append(tp / (tp + fp + fn))
    return sum(fracs) / len(fracs), oa, sum(jacs) / len(jacs)


def feature_age_by_steps(pred_pos, gt_pos, valid, times, threshold):
    """Walk each track forward until it first strays beyond ``threshold``."""
    ages, lost, durs = [], [], []
    for i in range(valid.shape[0]):
        steps = [j for j in range(valid.shape[1]) if valid[i, j]]
        t_q, t_e = times[steps[0]], times[steps[-1]]
        t_fail = t_e
        for j in steps:
            if math.dist(pred_pos[i, j], gt_pos[i, j]) > threshold:
                t_fail = times[j]
                break
        ages.append((t_fail - t_q) / (t_e - t_q))
        lost.append(t_fail == t_q and math.dist(pred_pos[i, steps[0]], gt_pos[i, steps[0]]) > threshold)
        durs.append(t_e - t_q)
    kept = [a for a, l in zip(ages, lost) if not l]
    fa = sum(kept) / len(kept) if kept else 0.0
    efa = sum(a * d for a, d in zip(ages, durs)) / sum(durs)
    return fa, efa, ages
