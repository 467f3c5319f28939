"""Desk-scale training on translating-texture scenes, with the optional feature-alignment phase.

A training sample is one tracking window of ``w`` steps from one scene.
Besides the forward event stacks it carries a second branch: the scene's
events replayed backwards about the window centre and rotated by a random
quarter turn. Slot ``s`` of that branch depicts the same instant as forward
slot ``w - 1 - s``.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .config import PipelineConfig, file_sha256
from .errors import ChecksumError, FormatError, NonFiniteLoss
from .events import EventStream, EventWindow, invert_time, rotate_events, rotate_points, select_window
from .features import bilinear_sample, encode_tensor, stack_to_tensor, to_level
from .gt import sample_query_tracks, translating_texture_scene
from .losses import LossBreakdown, loss_fa, loss_track, loss_visibility, total_loss
from .metrics import delta_avg
from .representation import StackBatch, add_noise, build_event_stack, normalize_batch
from .simulator import ContrastConfig, read_frame_dir, sample_threshold, simulate_events, write_frame_dir
from .tracker import QueryPoint, TrackerModel, initialize_window, track_window
from .tracks import TrackSet, read_queries_csv, read_tracks_csv, write_queries_csv, write_tracks_csv

log = logging.getLogger(__name__)

LOSS_HEADER = ["step", "l_track", "l_vis", "l_fa", "total"]
QUARTERS = (0, 90, 180, 270)


@dataclass
class TextureDatasetConfig:
    n_train: int = 20
    n_heldout: int = 5
    points: int = 16
    width: int = 64
    height: int = 64
    fps: float = 100.0
    speed_range: tuple = (30.0, 60.0)  # px/s
    margin: int = 6  # extra frames before and after the window
    window: int = 8
    n_events: int = 1024
    border: int = 12  # queries keep this far from the frame edge

    @property
    def n_frames(self) -> int:
        return self.window + 2 * self.margin


@dataclass
class SceneRecord:
    frames: object  # FrameSequence
    gt: TrackSet  # window steps only
    queries: list
    contrast: float
    theta: int
    split: str
    name: str = ""


@dataclass
class TrainSample:
    fwd: np.ndarray  # (w, H, W, B) raw stacks
    inv: np.ndarray  # (w, H', W', B) raw stacks, inverted and rotated
    n_events: int
    gt: torch.Tensor  # (P, w, 2)
    visible: torch.Tensor
    valid: torch.Tensor
    queries: list
    theta: int
    width: int
    height: int
    timestamps_us: np.ndarray


# ------------------------------------------------------------------- dataset


def scene_specs(cfg: TextureDatasetConfig, seed: int):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(cfg.n_train + cfg.n_heldout):
        ang = float(rng.uniform(0, 2 * np.pi))
        speed = float(rng.uniform(*cfg.speed_range))
        out.append({
            "name": f"scene_{i:03d}",
            "split": "train" if i < cfg.n_train else "heldout",
            "texture_seed": int(rng.integers(2**31)),
            "velocity": [speed * math.cos(ang), speed * math.sin(ang)],
            "contrast": sample_threshold(rng).c_pos,
            "theta": int(QUARTERS[int(rng.integers(4))]),
            "query_seed": int(rng.integers(2**31)),
        })
    return out


def _window_queries(scene, cfg: TextureDatasetConfig, query_seed: int):
    """Queries at the first window step, away from the border; GT cut to the window."""
    w0 = cfg.margin
    sl = slice(w0, w0 + cfg.window)
    gt = scene.tracks
    sub = TrackSet(gt.positions[:, sl], gt.visible[:, sl], gt.valid[:, sl], gt.timestamps_us[sl],
                   gt.point_ids)
    p = sub.positions
    b = cfg.border
    inside = ((p[..., 0] >= b) & (p[..., 0] <= cfg.width - 1 - b)
              & (p[..., 1] >= b) & (p[..., 1] <= cfg.height - 1 - b)).all(axis=1)
    window_scene = copy.copy(scene)
    window_scene.tracks = TrackSet(sub.positions, sub.visible & inside[:, None], sub.valid,
                                   sub.timestamps_us, sub.point_ids)
    rng = np.random.default_rng(query_seed)
    return sample_query_tracks(window_scene, cfg.points, 0.0, rng)


def build_scene(entry: dict, cfg: TextureDatasetConfig) -> SceneRecord:
    scene = translating_texture_scene(cfg.width, cfg.height, cfg.n_frames, cfg.fps,
                                      tuple(entry["velocity"]), entry["texture_seed"])
    queries, gt = _window_queries(scene, cfg, entry["query_seed"])
    return SceneRecord(scene.frames, gt, queries, entry["contrast"], entry["theta"], entry["split"],
                       entry["name"])


def write_dataset(out_dir, cfg: TextureDatasetConfig, seed: int) -> list[Path]:
    """Write every scene as PNG frames, GT tracks, queries and ``scene.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    entries = scene_specs(cfg, seed)
    for entry in entries:
        rec = build_scene(entry, cfg)
        d = out_dir / entry["name"]
        write_frame_dir(d / "frames", rec.frames)
        write_tracks_csv(d / "gt.csv", rec.gt)
        t = rec.gt.timestamps_us
        write_queries_csv(d / "queries.csv", [(t[q.t_index], q.x, q.y) for q in rec.queries])
        (d / "scene.json").write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")
        written += sorted(p for p in d.rglob("*") if p.is_file())
    meta = {"config": asdict(cfg), "seed": seed, "scenes": [s["name"] for s in entries]}
    (out_dir / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(out_dir / "dataset.json")
    return written


def load_dataset(root):
    """Read a dataset directory; returns ``(TextureDatasetConfig, [SceneRecord])``."""
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise FormatError(f"{root}: missing dataset.json")
    meta = json.loads(meta_path.read_text())
    c = meta["config"]
    c["speed_range"] = tuple(c["speed_range"])
    cfg = TextureDatasetConfig(**c)
    records = []
    for name in meta["scenes"]:
        d = root / name
        entry = json.loads((d / "scene.json").read_text())
        gt = read_tracks_csv(d / "gt.csv")
        rows = read_queries_csv(d / "queries.csv")
        t = gt.timestamps_us.tolist()
        queries = [QueryPoint(t.index(tq), x, y) for tq, x, y in rows]
        records.append(SceneRecord(read_frame_dir(d / "frames"), gt, queries, entry["contrast"],
                                   entry["theta"], entry["split"], name))
    return cfg, records


def generate_records(cfg: TextureDatasetConfig, seed: int):
    """In-memory equivalent of :func:`write_dataset` followed by :func:`load_dataset`."""
    return [build_scene(s, cfg) for s in scene_specs(cfg, seed)]


# ------------------------------------------------------------------ samples


def invert_about(stream: EventStream, pivot2_us: int) -> EventStream:
    """Replay a whole stream backwards about ``pivot2_us / 2`` (``t -> pivot2 - t``)."""
    t_end = max(int(stream.t[-1]), pivot2_us - int(stream.t[0])) + 1
    win = EventWindow(stream.width, stream.height, stream.t, stream.x, stream.y, stream.p,
                      t_end_us=t_end, span_us=2 * t_end - pivot2_us)
    inv = invert_time(win)
    return EventStream(inv.width, inv.height, inv.t, inv.x, inv.y, inv.p, check=False)


def prepare_sample(rec: SceneRecord, n_events: int, bins: int) -> TrainSample:
    events = simulate_events(rec.frames, ContrastConfig(rec.contrast, rec.contrast))
    ts = rec.gt.timestamps_us
    fwd = [build_event_stack(select_window(events, int(t), n_events), bins) for t in ts]
    inv_stream = invert_about(events, int(ts[0]) + int(ts[-1]))
    inv = [build_event_stack(rotate_events(select_window(inv_stream, int(t), n_events), rec.theta), bins)
           for t in ts]
    return TrainSample(
        np.stack([s.data for s in fwd]), np.stack([s.data for s in inv]), n_events,
        torch.as_tensor(rec.gt.positions, dtype=torch.float32),
        torch.as_tensor(rec.gt.visible), torch.as_tensor(rec.gt.valid),
        rec.queries, rec.theta, rec.frames.width, rec.frames.height, ts,
    )


def rotate_sample(sample: TrainSample, k: int) -> TrainSample:
    """Turn both branches and the tracks by ``k`` quarter turns (square frames only)."""
    k %= 4
    if k == 0:
        return sample
    if sample.width != sample.height:
        raise ValueError("rotation augmentation needs square frames")
    gt = sample.gt.numpy()
    x, y, w, h = rotate_points(gt[..., 0], gt[..., 1], sample.width, sample.height, 90 * k)
    qx, qy, _, _ = rotate_points([q.x for q in sample.queries], [q.y for q in sample.queries],
                                 sample.width, sample.height, 90 * k)
    queries = [QueryPoint(q.t_index, float(a), float(b)) for q, a, b in zip(sample.queries, qx, qy)]
    return replace(
        sample,
        fwd=np.ascontiguousarray(np.rot90(sample.fwd, k, axes=(1, 2))),
        inv=np.ascontiguousarray(np.rot90(sample.inv, k, axes=(1, 2))),
        gt=torch.as_tensor(np.stack([x, y], -1), dtype=sample.gt.dtype),
        queries=queries, width=w, height=h,
    )


def _branch_tensor(raw: np.ndarray, n_events: int, sigma: float, rng, dtype):
    from .representation import EventStack

    stacks = [EventStack(a, n_events) for a in raw]
    if rng is not None and sigma > 0:
        stacks = [add_noise(s, sigma, rng) for s in stacks]
    return stack_to_tensor(normalize_batch(StackBatch(stacks)).array(), dtype)


def sample_losses(model: TrackerModel, sample: TrainSample, m_iters: int, use_fa: bool,
                  rng: np.random.Generator | None = None, sigma: float = 0.0):
    """Forward pass on one sample; returns ``(l_track, l_vis, l_fa)`` tensors."""
    dtype = next(model.parameters()).dtype
    pyr = encode_tensor(_branch_tensor(sample.fwd, sample.n_events, sigma, rng, dtype), model.encoder)
    state = initialize_window(sample.queries, pyr, model_vis_init(model))
    state = track_window(state, pyr, model, m_iters, detach_coords=True)
    gt = sample.gt.to(dtype)
    l_track = loss_track(state.iterations, gt, sample.valid)
    l_vis = loss_visibility(state.vis_logits, sample.visible, sample.valid)
    if use_fa:
        pyr_inv = encode_tensor(_branch_tensor(sample.inv, sample.n_events, sigma, rng, dtype),
                                model.encoder)
        l_fa = loss_fa(pyr, pyr_inv, gt, sample.theta, sample.width, sample.height,
                       masks=sample.visible & sample.valid)
    else:
        l_fa = torch.zeros((), dtype=dtype)
    return l_track, l_vis, l_fa


def model_vis_init(model) -> float:
    return float(getattr(model, "vis_init", 2.0))


# --------------------------------------------------------------------- train


def train(model: TrackerModel, samples, cfg: PipelineConfig, start: int, stop: int,
          optimizer=None, fa_start: int | None = None, seed: int | None = None, on_step=None):
    """Run steps ``start .. stop-1``; FA-loss joins from ``fa_start`` (``None`` = never).

    The batch order and noise for step ``i`` depend only on ``(seed, i)``, so
    a run split at any step reproduces the unsplit one.
    """
    seed = cfg.seed if seed is None else seed
    if optimizer is None:
        optimizer = make_optimizer(model, cfg)
    rows = []
    for step in range(start, stop):
        rng = np.random.default_rng([seed, step])
        batch = rng.choice(len(samples), size=min(cfg.batch_scenes, len(samples)), replace=False)
        use_fa = fa_start is not None and step >= fa_start
        optimizer.zero_grad()
        picked = [samples[i] for i in batch]
        if cfg.augment:
            picked = [rotate_sample(s, int(rng.integers(4))) for s in picked]
        parts = [sample_losses(model, s, cfg.m_train, use_fa, rng, cfg.noise_sigma) for s in picked]
        l_track, l_vis, l_fa = (sum(p[k] for p in parts) / len(parts) for k in range(3))
        total = 0.1 * l_track + l_vis + 0.1 * l_fa
        if not torch.isfinite(total):
            raise NonFiniteLoss(step)
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        optimizer.step()
        row = total_loss(l_track.item(), l_vis.item(), l_fa.item())
        rows.append((step, row))
        if on_step is not None:
            on_step(step, row)
    return rows, optimizer


def make_optimizer(model, cfg: PipelineConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def write_loss_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOSS_HEADER)
        for step, b in rows:
            w.writerow([step] + [f"{v:.8g}" for v in b.as_row()])


def read_loss_csv(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != LOSS_HEADER:
            raise FormatError(f"{path}: expected header {','.join(LOSS_HEADER)}")
        return [(int(r["step"]), LossBreakdown(float(r["l_track"]), float(r["l_vis"]),
                                               float(r["l_fa"]), float(r["total"]))) for r in reader]


# ------------------------------------------------------------------ evaluate


@torch.no_grad()
def mean_track_loss(model, samples, m_iters: int) -> float:
    return float(np.mean([float(sample_losses(model, s, m_iters, False)[0]) for s in samples]))


@torch.no_grad()
def predict_sample(model, sample: TrainSample, m_iters: int) -> TrackSet:
    dtype = next(model.parameters()).dtype
    pyr = encode_tensor(_branch_tensor(sample.fwd, sample.n_events, 0.0, None, dtype), model.encoder)
    state = initialize_window(sample.queries, pyr, model_vis_init(model))
    state = track_window(state, pyr, model, m_iters)
    vis = (torch.sigmoid(state.vis_logits) > 0.5).numpy() & sample.valid.numpy()
    return TrackSet(state.positions.numpy().astype(np.float64), vis, sample.valid.numpy(),
                    sample.timestamps_us)


def heldout_delta(model, samples, cfg: PipelineConfig) -> float:
    """Mean over samples of the resolution-scaled position accuracy."""
    vals = []
    for s in samples:
        pred = predict_sample(model, s, cfg.m_eval)
        gt = TrackSet(s.gt.numpy().astype(np.float64), s.visible.numpy(), s.valid.numpy(),
                      s.timestamps_us)
        vals.append(delta_avg(pred, gt, cfg.thresholds, s.width, s.height, cfg.ref_resolution)[1])
    return float(np.mean(vals))


def zero_motion_delta(samples, cfg: PipelineConfig) -> float:
    """Position accuracy of predicting every point stays at its query: a floor for comparison."""
    vals = []
    for s in samples:
        gt_pos = s.gt.numpy().astype(np.float64)
        still = np.repeat(gt_pos[:, :1], gt_pos.shape[1], axis=1)
        gt = TrackSet(gt_pos, s.visible.numpy(), s.valid.numpy(), s.timestamps_us)
        pred = TrackSet(still, s.visible.numpy(), s.valid.numpy(), s.timestamps_us)
        vals.append(delta_avg(pred, gt, cfg.thresholds, s.width, s.height, cfg.ref_resolution)[1])
    return float(np.mean(vals))


# -------------------------------------------------------------------- probe


@dataclass
class ProbeResult:
    c_intra: float
    c_inter: float

    @property
    def gap(self) -> float:
        return self.c_intra - self.c_inter


def probe_samples(cfg: TextureDatasetConfig, texture_seed: int = 7, speed: float = 40.0,
                  contrast: float = 0.25, n_points: int = 8, seed: int = 0):
    """The same texture and points under a horizontal and a vertical motion."""
    out = []
    rng = np.random.default_rng(seed)
    b = cfg.border + 4
    xy = rng.uniform(b, [cfg.width - 1 - b, cfg.height - 1 - b], size=(n_points, 2))
    for vel in ((speed, 0.0), (0.0, speed)):
        scene = translating_texture_scene(cfg.width, cfg.height, cfg.n_frames, cfg.fps, vel, texture_seed)
        ts = scene.frames.timestamps_us[cfg.margin:cfg.margin + cfg.window]
        t_s = (ts - ts[0]) / 1e6
        pos = xy[:, None, :] + np.asarray(vel)[None, None, :] * t_s[None, :, None]
        ones = np.ones(pos.shape[:2], dtype=bool)
        rec = SceneRecord(scene.frames, TrackSet(pos, ones, ones, ts),
                          [QueryPoint(0, float(x), float(y)) for x, y in xy], contrast, 0, "probe")
        out.append(prepare_sample(rec, cfg.n_events, 10))
    return out


@torch.no_grad()
def motion_probe(model: TrackerModel, samples) -> ProbeResult:
    """Cosine similarity of level-1 descriptors along and across the two motions.

    ``C_intra`` averages ``cos(d_0, d_t)`` within a motion, ``C_inter``
    averages ``cos(d_0 horizontal, d_t vertical)``, both over ``t >= 1``
    and all points.
    """
    dtype = next(model.parameters()).dtype
    descs = []
    for s in samples:
        pyr = encode_tensor(_branch_tensor(s.fwd, s.n_events, 0.0, None, dtype), model.encoder)
        pos = to_level(s.gt.to(dtype).transpose(0, 1), pyr.level_stride(0))
        d = bilinear_sample(pyr.levels[0], pos)  # (w, P, d)
        descs.append(torch.nn.functional.normalize(d, dim=-1))
    h, v = descs
    intra = torch.cat([(h[:1] * h[1:]).sum(-1).reshape(-1), (v[:1] * v[1:]).sum(-1).reshape(-1)])
    inter = (h[:1] * v[1:]).sum(-1).reshape(-1)
    return ProbeResult(float(intra.mean()), float(inter.mean()))


# ---------------------------------------------------------------- experiment


@dataclass
class ExperimentResult:
    ltp_initial: float
    ltp_final: float
    heldout_delta_fa: float
    heldout_delta_nofa: float
    zero_motion_delta: float
    probe_fa: ProbeResult
    probe_nofa: ProbeResult
    rows_fa: list
    rows_nofa: list

    @property
    def ltp_reduction(self) -> float:
        return 1.0 - self.ltp_final / self.ltp_initial


def run_experiment(model_factory, cfg: PipelineConfig, ds_cfg: TextureDatasetConfig | None = None,
                   records=None, seed: int | None = None) -> ExperimentResult:
    """Shared warm-up to ``fa_start``, then one branch with FA-loss and one without."""
    seed = cfg.seed if seed is None else seed
    ds_cfg = ds_cfg or TextureDatasetConfig()
    records = generate_records(ds_cfg, seed) if records is None else records
    samples = [prepare_sample(r, ds_cfg.n_events, cfg.bins) for r in records]
    train_set = [s for s, r in zip(samples, records) if r.split == "train"]
    held = [s for s, r in zip(samples, records) if r.split != "train"]
    probe = probe_samples(ds_cfg, seed=seed)

    model = model_factory()
    ltp0 = mean_track_loss(model, train_set, cfg.m_train)
    warm = min(cfg.fa_start, cfg.steps)
    rows, opt = train(model, train_set, cfg, 0, warm, seed=seed)
    model_nofa = copy.deepcopy(model)
    opt_nofa = make_optimizer(model_nofa, cfg)
    opt_nofa.load_state_dict(opt.state_dict())
    rows_fa, _ = train(model, train_set, cfg, warm, cfg.steps, opt, fa_start=cfg.fa_start, seed=seed)
    rows_nofa, _ = train(model_nofa, train_set, cfg, warm, cfg.steps, opt_nofa, seed=seed)
    return ExperimentResult(
        ltp0, mean_track_loss(model, train_set, cfg.m_train),
        heldout_delta(model, held, cfg), heldout_delta(model_nofa, held, cfg),
        zero_motion_delta(held, cfg),
        motion_probe(model, probe), motion_probe(model_nofa, probe),
        rows + rows_fa, rows + rows_nofa,
    )


# -------------------------------------------------------------------- params


def save_params(path, model: torch.nn.Module, seed: int, extra: dict | None = None) -> list[Path]:
    """Flat little-endian f32 blob plus a JSON manifest with shapes and checksum."""
    path = Path(path)
    names, shapes, chunks = [], [], []
    for name, t in model.state_dict().items():
        names.append(name)
        shapes.append(list(t.shape))
        chunks.append(t.detach().cpu().to(torch.float32).reshape(-1).numpy())
    blob = np.concatenate(chunks).astype("<f4") if chunks else np.zeros(0, "<f4")
    path.write_bytes(blob.tobytes())
    meta = {"names": names, "shapes": shapes, "seed": int(seed), "sha256": file_sha256(path),
            "count": int(blob.size)}
    if extra:
        meta.update(extra)
    man = path.with_name(path.name + ".json")
    man.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return [path, man]


def read_params_manifest(path) -> dict:
    man = Path(path).with_name(Path(path).name + ".json")
    if not man.exists():
        raise FormatError(f"{path}: missing parameter manifest {man.name}")
    return json.loads(man.read_text())


def load_params(path, model: torch.nn.Module) -> dict:
    """Load a blob written by :func:`save_params`, verifying its checksum first."""
    path = Path(path)
    meta = read_params_manifest(path)
    if file_sha256(path) != meta["sha256"]:
        raise ChecksumError(f"{path}: checksum mismatch")
    blob = np.frombuffer(path.read_bytes(), dtype="<f4")
    if blob.size != meta["count"]:
        raise FormatError(f"{path}: expected {meta['count']} values, found {blob.size}")
    own = model.state_dict()
    if list(own.keys()) != meta["names"]:
        raise FormatError(f"{path}: parameter names do not match the model")
    state, i = {}, 0
    for name, shape in zip(meta["names"], meta["shapes"]):
        n = int(np.prod(shape)) if shape else 1
        state[name] = torch.from_numpy(blob[i:i + n].copy()).reshape(shape).to(own[name].dtype)
        i += n
    model.load_state_dict(state)
    return meta
