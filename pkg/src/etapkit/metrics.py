"""TAP metrics (position accuracy, occlusion accuracy, average Jaccard) and feature age."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptySet, NoVisiblePoints
from .tracks import TrackSet, align

DEFAULT_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
REF_RESOLUTION = 512
EFA_VARIANT = "v1"


@dataclass
class TapReport:
    delta_per_threshold: dict
    delta_avg: float
    oa: float
    aj: float
    point_count: int
    timestep_count: int
    jaccard_per_threshold: dict = field(default_factory=dict)


@dataclass
class FeatureAgeReport:
    fa: float
    expected_fa: float
    ages: list
    lost_at_start: list
    dist_threshold: float
    efa_variant: str = EFA_VARIANT


def scaled_thresholds(thresholds, width, height, ref_resolution=REF_RESOLUTION):
    scale = min(width, height) / ref_resolution
    return [float(t) * scale for t in thresholds]


def _errors(pred: TrackSet, gt: TrackSet):
    return np.linalg.norm(pred.positions - gt.positions, axis=-1)


def delta_avg(pred: TrackSet, gt: TrackSet, thresholds=DEFAULT_THRESHOLDS, width=REF_RESOLUTION,
              height=REF_RESOLUTION, ref_resolution=REF_RESOLUTION):
    """Fraction of GT-visible valid entries within each (resolution-scaled) threshold.

    Returns ``({threshold: fraction}, mean)`` keyed by the unscaled threshold.
    """
    pred = align(pred, gt)
    mask = gt.valid & gt.visible
    if not mask.any():
        raise NoVisiblePoints("no visible ground-truth entries")
    err = _errors(pred, gt)
    per = {}
    for t, ts in zip(thresholds, scaled_thresholds(thresholds, width, height, ref_resolution)):
        per[float(t)] = float(((err < ts) & mask).sum() / mask.sum())
    return per, float(np.mean(list(per.values())))


def occlusion_accuracy(pred: TrackSet, gt: TrackSet) -> float:
    pred = align(pred, gt)
    mask = gt.valid
    if not mask.any():
        raise EmptySet("no valid entries")
    return float(((pred.visible == gt.visible) & mask).sum() / mask.sum())


def average_jaccard(pred: TrackSet, gt: TrackSet, thresholds=DEFAULT_THRESHOLDS, width=REF_RESOLUTION,
                    height=REF_RESOLUTION, ref_resolution=REF_RESOLUTION):
    """Returns ``(aj, {threshold: jaccard})``."""
    pred = align(pred, gt)
    mask = gt.valid
    if not mask.any():
        raise EmptySet("no valid entries")
    err = _errors(pred, gt)
    pv = pred.visible & mask
    gv = gt.visible & mask
    per = {}
    for t, ts in zip(thresholds, scaled_thresholds(thresholds, width, height, ref_resolution)):
        close = err < ts
        tp = (pv & gv & close).sum()
        fp = (pv & (~gv | ~close)).sum()
        fn = (gv & (~pv | ~close)).sum()
        denom = tp + fp + fn
        per[float(t)] = float(tp / denom) if denom else 1.0
    return float(np.mean(list(per.values()))), per


def tap_report(pred: TrackSet, gt: TrackSet, thresholds=DEFAULT_THRESHOLDS, width=REF_RESOLUTION,
               height=REF_RESOLUTION, ref_resolution=REF_RESOLUTION) -> TapReport:
    per, avg = delta_avg(pred, gt, thresholds, width, height, ref_resolution)
    aj, jac = average_jaccard(pred, gt, thresholds, width, height, ref_resolution)
    return TapReport(per, avg, occlusion_accuracy(pred, gt), aj, gt.n_points, gt.n_steps, jac)


def feature_age(pred: TrackSet, gt: TrackSet, dist_threshold: float = 5.0) -> FeatureAgeReport:
    """Normalised survival time of each track before it strays ``dist_threshold`` px.

    For a track queried at ``t_q`` whose GT ends at ``t_e`` the age is
    ``(t_fail - t_q) / (t_e - t_q)``, with ``t_fail`` the first timestep
    whose error exceeds the threshold (``t_e`` if none). ``fa`` averages the
    ages of tracks not lost at their query step; ``expected_fa`` averages all
    tracks weighted by GT duration, lost ones counting as zero.
    """
    if dist_threshold <= 0:
        raise ValueError("dist_threshold must be positive")
    pred = align(pred, gt)
    err = _errors(pred, gt)
    t = gt.timestamps_us.astype(np.float64)
    ages, lost, durations = [], [], []
    for i in range(gt.n_points):
        idx = np.nonzero(gt.valid[i])[0]
        if len(idx) < 2:
            continue
        tq, te = t[idx[0]], t[idx[-1]]
        bad = idx[err[i, idx] > dist_threshold]
        t_fail = t[bad[0]] if len(bad) else te
        ages.append((t_fail - tq) / (te - tq))
        lost.append(bool(len(bad) and bad[0] == idx[0]))
        durations.append(te - tq)
    if not ages:
        raise EmptySet("no track spans two or more valid timesteps")
    ages_a = np.array(ages)
    lost_a = np.array(lost)
    dur = np.array(durations)
    fa = float(ages_a[~lost_a].mean()) if (~lost_a).any() else 0.0
    efa = float((ages_a * dur).sum() / dur.sum())
    return FeatureAgeReport(fa, efa, [float(a) for a in ages], lost, float(dist_threshold))


def write_reports(out_dir, tap: TapReport | None, fa: FeatureAgeReport | None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {}
    if tap is not None:
        payload["tap"] = {k: v for k, v in asdict(tap).items()}
        payload["tap"]["delta_per_threshold"] = {str(k): v for k, v in tap.delta_per_threshold.items()}
        payload["tap"]["jaccard_per_threshold"] = {str(k): v for k, v in tap.jaccard_per_threshold.items()}
    if fa is not None:
        payload["feature_age"] = asdict(fa)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for name, value in summary_rows(tap, fa):
            w.writerow([name, f"{value:.6f}"])
    return [json_path, csv_path]


def summary_rows(tap: TapReport | None, fa: FeatureAgeReport | None):
    rows = []
    if tap is not None:
        rows += [("AJ", tap.aj), ("delta_avg", tap.delta_avg), ("OA", tap.oa)]
        rows += [(f"delta@{k:g}", v) for k, v in tap.delta_per_threshold.items()]
    if fa is not None:
        rows += [("FA", fa.fa), ("expected_FA", fa.expected_fa)]
    return rows


def format_summary(tap: TapReport | None, fa: FeatureAgeReport | None) -> str:
    return "\n".join(f"{name:<12s} {value:8.4f}" for name, value in summary_rows(tap, fa))
