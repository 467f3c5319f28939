"""Command-line entry point: ``etapkit <subcommand> ...``.

Exit codes: 0 success, 2 bad input, 3 a verification check failed.
Each command writes ``<output>.manifest.json`` next to its main output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import PipelineConfig, RunManifest, dump_config, load_config
from .errors import EtapError
from .events import read_evt1, select_window, write_evt1
from .metrics import feature_age, format_summary, tap_report, write_reports
from .representation import build_event_stack, build_voxel_grid, export_stack
from .simulator import read_frame_dir, sample_threshold, simulate_events, upsample_linear
from .tracks import TrackSet, read_queries_csv, read_tracks_csv, write_tracks_csv

log = logging.getLogger("etapkit")

EXIT_OK, EXIT_INPUT, EXIT_VERIFY = 0, 2, 3
OVERRIDABLE = ("w", "stride", "m_eval", "m_train", "bins", "n_events", "d", "levels", "delta",
               "encoder", "encoder_width", "hidden", "heads", "blocks", "steps", "fa_start", "lr",
               "batch_scenes", "fa_threshold", "ref_resolution")


class VerificationFailed(Exception):
    pass


def _csv_floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="etapkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed (fallback: $ETAPKIT_SEED)")
    common.add_argument("--threads", type=int, default=None, help="torch threads (0 = all cores)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
    for key in OVERRIDABLE:
        common.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=None,
                            help=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="frames directory -> EVT1 event file")
    s.add_argument("frames_dir")
    s.add_argument("out_evt")
    s.add_argument("--contrast", type=float, help="fixed contrast sensitivity (default: sampled)")
    s.add_argument("--upsample", type=int, default=1, help="linear upsampling factor")

    s = sub.add_parser("stack", parents=[common], help="event file -> stack at one timestamp")
    s.add_argument("evt")
    s.add_argument("out")
    s.add_argument("--t-end", type=int, required=True)
    s.add_argument("--kind", choices=("stack", "voxel"), default="stack")

    s = sub.add_parser("track", parents=[common], help="track query points through an event file")
    s.add_argument("evt")
    s.add_argument("queries")
    s.add_argument("out")
    s.add_argument("--schedule", required=True,
                   help="CSV file with a t_us column, or start:stop:step in us (stop exclusive)")
    s.add_argument("--params", help="parameter blob from train-toy (default: seeded initialisation)")

    s = sub.add_parser("eval", parents=[common], help="score predicted tracks against ground truth")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("out_dir")
    s.add_argument("--width", type=int, help="sensor width for threshold scaling (default: reference)")
    s.add_argument("--height", type=int)

    s = sub.add_parser("toy-gen", parents=[common], help="generate toy scenes with exact tracks")
    s.add_argument("out_dir")
    s.add_argument("--kind", choices=("sprites", "texture"), default="sprites")
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--sprites", type=int, default=2)
    s.add_argument("--duration", type=float, default=0.2)
    s.add_argument("--fps", type=float, default=50.0)
    s.add_argument("--points", type=int, default=64)
    s.add_argument("--foreground", type=float, default=0.6)
    s.add_argument("--track-from", type=int, default=0,
                   help="start GT and queries at this time (us) so events precede the first query")
    s.add_argument("--train-scenes", type=int, default=20)
    s.add_argument("--heldout-scenes", type=int, default=5)

    s = sub.add_parser("gt-spinner", parents=[common], help="spinner ground truth from events")
    s.add_argument("evt")
    s.add_argument("out")
    s.add_argument("--center", type=_csv_floats, required=True, help="cx,cy")
    s.add_argument("--radii", type=_csv_floats, required=True)
    s.add_argument("--angles", type=_csv_floats, required=True, help="rad at the first histogram time")
    s.add_argument("--lobes", type=int, default=3)
    s.add_argument("--hist-events", type=int, default=20000)
    s.add_argument("--hist-rate", type=float, default=1000.0)
    s.add_argument("--output-rate", type=float, default=330.0)
    s.add_argument("--direction", type=int, default=1, choices=(1, -1))

    s = sub.add_parser("train-toy", parents=[common], help="train on a toy-gen texture dataset")
    s.add_argument("dataset_dir")
    s.add_argument("out_params")
    s.add_argument("--loss-csv", help="default: <out_params>.losses.csv")

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    s.add_argument("--epsilon", type=float, default=1e-4)
    s.add_argument("--inject-fault", type=float, default=0.0,
                   help="scale analytic gradients by 1+FAULT (tests the checker)")
    s.add_argument("--grad-sample", type=int, default=0,
                   help="check this many randomly chosen parameters (0 = all)")
    s.add_argument("--out", help="optional JSON report")

    s = sub.add_parser("verify", parents=[common], help="run the oracle self-check suite")
    s.add_argument("--params", help="also verify a parameter blob's checksum")
    s.add_argument("--skip-gradients", action="store_true")
    s.add_argument("--grad-sample", type=int, default=128,
                   help="parameters covered by the gradient check (0 = all)")
    s.add_argument("--out", help="optional JSON report")
    return p


def _config(args) -> PipelineConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    return load_config(args.config, overrides)


def _threads(n: int, default: int | None = None):
    n = n or default or (os.cpu_count() or 1)
    torch.set_num_threads(max(1, n))


def _manifest(args, cfg, argv) -> RunManifest:
    return RunManifest(args.command, cfg.to_dict(), cfg.seed, argv=list(argv))


def _finish(man: RunManifest, outputs, main_output, started):
    for o in outputs:
        man.add_output(o)
    man.write(Path(str(main_output) + ".manifest.json"), started)


def _model(cfg, params=None):
    from .tracker import make_model
    from .training import load_params

    model = make_model(cfg)
    if params:
        load_params(params, model)
    model.eval()
    return model


# ---------------------------------------------------------------- commands


def cmd_simulate(args, cfg, man):
    seq = read_frame_dir(args.frames_dir)
    man.add_input(args.frames_dir)
    if args.upsample > 1:
        seq = upsample_linear(seq, args.upsample)
    rng = np.random.default_rng(cfg.seed)
    contrast = sample_threshold(rng, cfg.contrast_lo, cfg.contrast_hi, cfg.log_eps)
    if args.contrast is not None:
        contrast = type(contrast)(args.contrast, args.contrast, cfg.log_eps)
    stream = simulate_events(seq, contrast)
    write_evt1(args.out_evt, stream)
    man.config["sampled_contrast"] = contrast.c_pos
    log.info("%d events from %d frames (C=%.4f)", len(stream), len(seq), contrast.c_pos)
    return [args.out_evt], args.out_evt


def cmd_stack(args, cfg, man):
    stream = read_evt1(args.evt)
    man.add_input(args.evt)
    win = select_window(stream, args.t_end, cfg.n_events)
    stack = (build_event_stack if args.kind == "stack" else build_voxel_grid)(win, cfg.bins)
    export_stack(args.out, stack)
    return [args.out, args.out + ".json"], args.out


def _schedule(sched: str) -> np.ndarray:
    if Path(sched).is_file():
        with open(sched, newline="") as f:
            reader = csv.DictReader(f)
            if "t_us" not in (reader.fieldnames or []):
                raise ValueError(f"{sched}: schedule file needs a t_us column")
            return np.array([int(r["t_us"]) for r in reader], dtype=np.int64)
    parts = sched.split(":")
    if len(parts) != 3:
        raise ValueError("schedule must be a CSV file or start:stop:step")
    start, stop, step = (int(v) for v in parts)
    return np.arange(start, stop, step, dtype=np.int64)


def cmd_track(args, cfg, man):
    from .tracker import queries_from_times, track_sequence

    stream = read_evt1(args.evt)
    rows = read_queries_csv(args.queries)
    schedule = _schedule(args.schedule)
    for path in (args.evt, args.queries, args.params):
        if path:
            man.add_input(path)
    model = _model(cfg, args.params)
    tracks = track_sequence(stream, queries_from_times(rows, schedule), schedule, cfg, model)
    write_tracks_csv(args.out, tracks)
    return [args.out, str(Path(args.out).with_suffix(".json"))], args.out


def cmd_eval(args, cfg, man):
    pred = read_tracks_csv(args.pred)
    gt = read_tracks_csv(args.gt)
    man.add_input(args.pred)
    man.add_input(args.gt)
    width = args.width or cfg.ref_resolution
    height = args.height or width
    tap = tap_report(pred, gt, cfg.thresholds, width, height, cfg.ref_resolution)
    fa = feature_age(pred, gt, cfg.fa_threshold)
    outputs = write_reports(args.out_dir, tap, fa)
    print(format_summary(tap, fa))
    return outputs, Path(args.out_dir) / "report"


def cmd_toy_gen(args, cfg, man):
    from .gt import ToySceneConfig, generate_toy_scene, sample_query_tracks
    from .simulator import write_frame_dir
    from .training import TextureDatasetConfig, write_dataset
    from .tracks import write_queries_csv

    out = Path(args.out_dir)
    if args.kind == "texture":
        ds = TextureDatasetConfig(n_train=args.train_scenes, n_heldout=args.heldout_scenes,
                                  width=args.width, height=args.height)
        return write_dataset(out, ds, cfg.seed), out / "dataset"
    scfg = ToySceneConfig(args.width, args.height, args.duration, args.fps,
                          n_random_sprites=args.sprites, texture_seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    scene = generate_toy_scene(scfg, rng)
    write_frame_dir(out / "frames", scene.frames)
    queries, gt = sample_query_tracks(scene.tracks_from(args.track_from), args.points, args.foreground, rng)
    # point ids follow the query file's row order, as in `track` output
    pixels = gt.point_ids.tolist()
    gt = TrackSet(gt.positions, gt.visible, gt.valid, gt.timestamps_us)
    write_tracks_csv(out / "gt.csv", gt)
    ts = gt.timestamps_us
    write_queries_csv(out / "queries.csv", [(ts[q.t_index], q.x, q.y) for q in queries])
    with open(out / "schedule.csv", "w", newline="") as f:
        f.write("t_us\n" + "".join(f"{int(t)}\n" for t in ts))
    meta = {"width": scfg.width, "height": scfg.height, "fps": scfg.fps, "duration_s": scfg.duration_s,
            "upsample_factor": scene.upsample_factor(), "track_pixels": pixels,
            "sprites": [vars(s) if hasattr(s, "__dict__") else s.__repr__() for s in scene.sprites]}
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=float) + "\n")
    outputs = sorted(p for p in out.rglob("*") if p.is_file() and not p.name.endswith(".manifest.json"))
    return outputs, out / "scene"


def cmd_gt_spinner(args, cfg, man):
    from .gt import SpinnerGtConfig, estimate_spinner, spinner_groundtruth

    stream = read_evt1(args.evt)
    man.add_input(args.evt)
    scfg = SpinnerGtConfig(args.hist_events, args.hist_rate, args.lobes, tuple(args.center),
                           tuple(args.radii), tuple(args.angles), args.output_rate,
                           direction=args.direction)
    est = estimate_spinner(stream, scfg)
    tracks = spinner_groundtruth(stream, scfg, est)
    write_tracks_csv(args.out, tracks)
    omega_path = str(Path(args.out).with_suffix("")) + ".omega.csv"
    with open(omega_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["segment", "t_start_us", "t_end_us", "omega_rad_s"])
        b = est.boundaries_us
        for i, om in enumerate(est.omega):
            w.writerow([i, f"{b[i]:.3f}", f"{b[i + 1]:.3f}", f"{om:.9g}"])
    return [args.out, str(Path(args.out).with_suffix(".json")), omega_path], args.out


def cmd_train_toy(args, cfg, man):
    from .tracker import make_model
    from .training import load_dataset, prepare_sample, save_params, train, write_loss_csv

    torch.manual_seed(cfg.seed)
    ds_cfg, records = load_dataset(args.dataset_dir)
    man.add_input(args.dataset_dir)
    samples = [prepare_sample(r, ds_cfg.n_events, cfg.bins) for r in records if r.split == "train"]
    model = make_model(cfg, zero_heads=True)
    rows, _ = train(model, samples, cfg, 0, cfg.steps, fa_start=cfg.fa_start, seed=cfg.seed,
                    on_step=lambda i, b: log.info("step %d total %.5f", i, b.total))
    loss_csv = args.loss_csv or args.out_params + ".losses.csv"
    write_loss_csv(loss_csv, rows)
    outputs = save_params(args.out_params, model, cfg.seed, {"steps": cfg.steps, "config": dump_config(cfg)})
    return [*map(str, outputs), loss_csv], args.out_params


def cmd_grad_check(args, cfg, man):
    from .verify import GRAD_TOLERANCE, gradient_errors

    errs = gradient_errors(cfg.seed, args.epsilon, args.inject_fault, sample=args.grad_sample)
    ok = True
    for name, err in errs.items():
        passed = err < GRAD_TOLERANCE
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] {name:<8s} max rel err {err:.3e}")
    outputs = []
    if args.out:
        Path(args.out).write_text(json.dumps({"max_rel_err": errs, "tolerance": GRAD_TOLERANCE,
                                              "passed": bool(ok)}, indent=2, sort_keys=True) + "\n")
        outputs = [args.out]
    if not ok:
        raise VerificationFailed("gradient check failed")
    return outputs, args.out


def cmd_verify(args, cfg, man):
    from .training import read_params_manifest
    from .config import file_sha256
    from .verify import CheckResult, run_suite

    results = run_suite(cfg, include_gradients=not args.skip_gradients, grad_sample=args.grad_sample)
    if args.params:
        man.add_input(args.params)
        try:
            want = read_params_manifest(args.params)["sha256"]
            ok = file_sha256(args.params) == want
            results.append(CheckResult("params checksum", ok, "matches manifest" if ok else "checksum mismatch"))
        except (OSError, KeyError, EtapError) as exc:
            results.append(CheckResult("params checksum", False, str(exc)))
    for r in results:
        print(r.line())
    ok = all(r.ok for r in results)
    outputs = []
    if args.out:
        Path(args.out).write_text(json.dumps(
            [{"name": r.name, "ok": r.ok, "detail": r.detail} for r in results], indent=2) + "\n")
        outputs = [args.out]
    if not ok:
        raise VerificationFailed("verification failed")
    return outputs, args.out


COMMANDS = {
    "simulate": cmd_simulate,
    "stack": cmd_stack,
    "track": cmd_track,
    "eval": cmd_eval,
    "toy-gen": cmd_toy_gen,
    "gt-spinner": cmd_gt_spinner,
    "train-toy": cmd_train_toy,
    "grad-check": cmd_grad_check,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = _config(args)
        _threads(cfg.threads, 1 if args.command == "train-toy" else None)
        man = _manifest(args, cfg, argv)
        outputs, main_output = COMMANDS[args.command](args, cfg, man)
        if main_output is not None:
            _finish(man, outputs, main_output, started)
    except VerificationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (EtapError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
