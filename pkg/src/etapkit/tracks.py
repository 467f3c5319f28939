"""Track containers and their CSV/JSON interchange formats."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AlignmentError, FormatError

TRACK_HEADER = ["point_id", "t_us", "x", "y", "visible", "valid"]


@dataclass
class TrackSet:
    """Per-point trajectories over a schedule of ``T`` timestamps.

    positions: ``(N, T, 2)`` float, visible/valid: ``(N, T)`` bool.
    """

    positions: np.ndarray
    visible: np.ndarray
    valid: np.ndarray
    timestamps_us: np.ndarray
    point_ids: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, len(self.timestamps_us), 2)
        n, t = self.positions.shape[:2]
        self.visible = np.asarray(self.visible, dtype=bool).reshape(n, t)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(n, t)
        self.timestamps_us = np.asarray(self.timestamps_us, dtype=np.int64)
        if self.point_ids is None:
            self.point_ids = np.arange(n)
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64)
        if len(self.point_ids) != n:
            raise ValueError("point_ids length does not match positions")

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.positions.shape[1]

    @classmethod
    def empty(cls, timestamps_us):
        t = len(timestamps_us)
        return cls(np.zeros((0, t, 2)), np.zeros((0, t), bool), np.zeros((0, t), bool), timestamps_us)

    def query_indices(self) -> np.ndarray:
        """First valid timestep of every point (``T`` when never valid)."""
        has = self.valid.any(axis=1)
        return np.where(has, self.valid.argmax(axis=1), self.n_steps)

    def subset(self, idx) -> "TrackSet":
        return TrackSet(self.positions[idx], self.visible[idx], self.valid[idx],
                        self.timestamps_us, self.point_ids[idx])

    def summary(self) -> dict:
        return {
            "n_points": int(self.n_points),
            "n_steps": int(self.n_steps),
            "t_first_us": int(self.timestamps_us[0]) if self.n_steps else None,
            "t_last_us": int(self.timestamps_us[-1]) if self.n_steps else None,
            "valid_entries": int(self.valid.sum()),
            "visible_entries": int((self.visible & self.valid).sum()),
        }


def align(pred: TrackSet, gt: TrackSet) -> TrackSet:
    """Reorder ``pred`` to ``gt``'s point order; ids and timestamps must match exactly."""
    if not np.array_equal(pred.timestamps_us, gt.timestamps_us):
        raise AlignmentError("prediction and ground truth use different timestamps")
    if sorted(pred.point_ids.tolist()) != sorted(gt.point_ids.tolist()):
        raise AlignmentError("prediction and ground truth have different point ids")
    if len(set(gt.point_ids.tolist())) != gt.n_points:
        raise AlignmentError("duplicate point ids")
    where = {pid: i for i, pid in enumerate(pred.point_ids.tolist())}
    return pred.subset(np.array([where[p] for p in gt.point_ids.tolist()], dtype=np.int64))


def write_tracks_csv(path, tracks: TrackSet, summary: bool = True) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACK_HEADER)
        for i, pid in enumerate(tracks.point_ids.tolist()):
            for j, t in enumerate(tracks.timestamps_us.tolist()):
                x, y = tracks.positions[i, j]
                w.writerow([pid, t, f"{x:.6f}", f"{y:.6f}",
                            int(tracks.visible[i, j]), int(tracks.valid[i, j])])
    if summary:
        path.with_suffix(".json").write_text(json.dumps(tracks.summary(), indent=2, sort_keys=True) + "\n")


def read_tracks_csv(path) -> TrackSet:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != TRACK_HEADER:
            raise FormatError(f"{path}: expected header {','.join(TRACK_HEADER)}")
        rows = list(reader)
    if not rows:
        return TrackSet.empty([])
    ids = sorted({int(r["point_id"]) for r in rows})
    times = sorted({int(r["t_us"]) for r in rows})
    pi = {p: i for i, p in enumerate(ids)}
    ti = {t: i for i, t in enumerate(times)}
    pos = np.zeros((len(ids), len(times), 2))
    vis = np.zeros((len(ids), len(times)), bool)
    val = np.zeros((len(ids), len(times)), bool)
    seen = np.zeros((len(ids), len(times)), bool)
    for r in rows:
        i, j = pi[int(r["point_id"])], ti[int(r["t_us"])]
        pos[i, j] = float(r["x"]), float(r["y"])
        vis[i, j] = bool(int(r["visible"]))
        val[i, j] = bool(int(r["valid"]))
        seen[i, j] = True
    if not seen.all():
        raise FormatError(f"{path}: track table is not rectangular")
    return TrackSet(pos, vis, val, np.array(times), np.array(ids))


def read_queries_csv(path):
    """Query file rows ``t_us,x,y`` -> list of ``(t_us, x, y)``."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["t_us", "x", "y"]:
            raise FormatError(f"{path}: expected header t_us,x,y")
        return [(int(r["t_us"]), float(r["x"]), float(r["y"])) for r in reader]


def write_queries_csv(path, queries) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t_us", "x", "y"])
        for t, x, y in queries:
            w.writerow([int(t), f"{x:.6f}", f"{y:.6f}"])
