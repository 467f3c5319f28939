import json
from pathlib import Path

import numpy as np
import pytest

from etapkit.cli import EXIT_INPUT, EXIT_OK, EXIT_VERIFY, main
from etapkit.events import write_evt1
from etapkit.gt import piecewise_angle, spinner_frames
from etapkit.simulator import ContrastConfig, simulate_events

SMALL = ["--d", "8", "--hidden", "16", "--heads", "2", "--blocks", "1", "--encoder-width", "8",
         "--n-events", "300", "--bins", "4"]


def write_spinner_evt(path, width=40, radius=15.0):
    ts = np.round(np.arange(601) * 500).astype(np.int64)
    centre = ((width - 1) / 2, (width - 1) / 2)
    seq = spinner_frames(width, width, centre, radius, 3, piecewise_angle([30.0], [0.3]), ts)
    write_evt1(path, simulate_events(seq, ContrastConfig(0.2, 0.2)))


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(root: Path, monkeypatch):
    """Run every subcommand once inside ``root`` using relative paths."""
    monkeypatch.chdir(root)
    codes = {}
    codes["toy-gen"] = run("toy-gen", "scene", "--width", 32, "--height", 32, "--sprites", 2,
                           "--duration", 0.2, "--fps", 50, "--points", 8, "--track-from", 40000, "--seed", 3)
    codes["simulate"] = run("simulate", "scene/frames", "ev.evt", "--upsample", 4, "--contrast", 0.05, "--seed", 3)
    codes["stack"] = run("stack", "ev.evt", "stack.bin", "--t-end", 200_000, *SMALL)
    codes["track"] = run("track", "ev.evt", "scene/queries.csv", "pred.csv", "--schedule", "scene/schedule.csv",
                         "--seed", 1, *SMALL)
    Path("queries.csv").write_text("t_us,x,y\n40000,10.0,12.0\n80000,20.5,8.25\n")
    codes["track range"] = run("track", "ev.evt", "queries.csv", "pred2.csv", "--schedule", "40000:200001:20000",
                               "--seed", 1, *SMALL)
    codes["eval"] = run("eval", "pred.csv", "scene/gt.csv", "report", "--width", 32)
    write_spinner_evt("spin.evt")
    codes["gt-spinner"] = run("gt-spinner", "spin.evt", "spin_gt.csv", "--center", "19.5,19.5",
                              "--radii", "5,10", "--angles", "0,1", "--hist-events", 3000)
    codes["toy-gen texture"] = run("toy-gen", "data", "--kind", "texture", "--train-scenes", 2,
                                   "--heldout-scenes", 1, "--seed", 5)
    codes["train-toy"] = run("train-toy", "data", "params.pt", "--steps", 2, "--fa-start", 1,
                             "--batch-scenes", 1, "--seed", 5, *SMALL)
    codes["grad-check"] = run("grad-check", "--grad-sample", 6, "--out", "grad.json")
    codes["verify"] = run("verify", "--grad-sample", 6, "--params", "params.pt", "--out", "verify.json")
    return codes


def snapshot(root: Path):
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        data = p.read_bytes()
        if p.name.endswith(".manifest.json"):
            man = json.loads(data)
            man.pop("timing")
            data = json.dumps(man, sort_keys=True).encode()
        out[str(p.relative_to(root))] = data
    return out


@pytest.mark.slow
def test_every_subcommand_is_byte_deterministic(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    codes = pipeline(a, monkeypatch)
    assert all(c == EXIT_OK for c in codes.values()), codes
    assert pipeline(b, monkeypatch) == codes
    sa, sb = snapshot(a), snapshot(b)
    assert sorted(sa) == sorted(sb)
    for name in sa:
        assert sa[name] == sb[name], name
    for main_out in ("ev.evt", "stack.bin", "pred.csv", "spin_gt.csv", "params.pt", "grad.json", "verify.json"):
        assert main_out + ".manifest.json" in sa


def test_bad_input_exit_code(tmp_path, capsys):
    assert run("stack", tmp_path / "missing.evt", tmp_path / "s.bin", "--t-end", 5) == EXIT_INPUT
    (tmp_path / "bad.evt").write_bytes(b"NOPE" + bytes(40))
    assert run("stack", tmp_path / "bad.evt", tmp_path / "s.bin", "--t-end", 5) == EXIT_INPUT
    assert run("eval", tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "r", "--set", "nonsense") == EXIT_INPUT
    assert "error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    (tmp_path / "c.cfg").write_text("no_such_key = 3\n")
    assert run("grad-check", "--config", tmp_path / "c.cfg") == EXIT_INPUT


def test_not_enough_events_is_an_input_error(tmp_path):
    write_spinner_evt(tmp_path / "s.evt", width=16, radius=6.0)
    assert run("stack", tmp_path / "s.evt", tmp_path / "s.bin", "--t-end", 1, "--n-events", 500) == EXIT_INPUT


def test_injected_gradient_fault_fails(tmp_path, capsys):
    assert run("grad-check", "--grad-sample", 4, "--inject-fault", 0.01) == EXIT_VERIFY
    assert "FAIL" in capsys.readouterr().out


def test_corrupted_params_fail_verification(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run("toy-gen", "data", "--kind", "texture", "--train-scenes", 1, "--heldout-scenes", 0) == EXIT_OK
    assert run("train-toy", "data", "p.pt", "--steps", 1, "--batch-scenes", 1, *SMALL) == EXIT_OK
    assert run("verify", "--skip-gradients", "--params", "p.pt") == EXIT_OK
    blob = bytearray(Path("p.pt").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    Path("p.pt").write_bytes(bytes(blob))
    capsys.readouterr()
    assert run("verify", "--skip-gradients", "--params", "p.pt") == EXIT_VERIFY
    assert "checksum mismatch" in capsys.readouterr().out
