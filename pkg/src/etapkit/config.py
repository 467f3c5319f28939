"""Pipeline configuration, key-value config files and run manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__

log = logging.getLogger(__name__)

SEED_ENV = "ETAPKIT_SEED"


@dataclass
class PipelineConfig:
    """All tunables, defaulting to the reference hyperparameters.

    Config files are plain ``key = value`` lines; ``#`` starts a comment.
    List values are comma separated.
    """

    # tracker
    w: int = 8
    stride: int = 4
    m_train: int = 4
    m_eval: int = 6
    vis_init_logit: float = 2.0
    eta_freqs: int = 8
    eta_scale: float = 16.0
    hidden: int = 128
    heads: int = 4
    blocks: int = 2
    # representation
    bins: int = 10
    n_events: int = 400_000
    noise_sigma: float = 0.1
    # features
    d: int = 128
    levels: int = 4
    k: int = 4
    delta: int = 3
    encoder: str = "toy"
    encoder_width: int = 64
    # simulation
    contrast_lo: float = 0.16
    contrast_hi: float = 0.34
    log_eps: float = 1e-3
    # evaluation
    thresholds: tuple = (1.0, 2.0, 4.0, 8.0, 16.0)
    ref_resolution: int = 512
    fa_threshold: float = 5.0
    # training
    lr: float = 1e-3
    weight_decay: float = 1e-4
    steps: int = 500
    fa_start: int = 300
    batch_scenes: int = 4
    augment: bool = False  # random quarter-turn rotation of training samples
    # misc
    seed: int = 0
    threads: int = 0

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def replace(self, **overrides) -> "PipelineConfig":
        return apply_overrides(self, overrides)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d


def _coerce(name, raw, default):
    if isinstance(default, tuple):
        if isinstance(raw, str):
            raw = [v for v in raw.replace(" ", "").split(",") if v]
        return tuple(float(v) for v in raw)
    if isinstance(default, bool):
        return str(raw).lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(float(raw))
    if isinstance(default, float):
        return float(raw)
    return str(raw)


def apply_overrides(cfg: PipelineConfig, overrides: dict) -> PipelineConfig:
    values = {}
    defaults = PipelineConfig()
    for key, raw in overrides.items():
        if raw is None:
            continue
        if key not in PipelineConfig.keys():
            raise KeyError(f"unknown config key {key!r}")
        value = _coerce(key, raw, getattr(defaults, key))
        if value != getattr(cfg, key):
            log.info("config override: %s = %r (was %r)", key, value, getattr(cfg, key))
        values[key] = value
    return dataclasses.replace(cfg, **values)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path=None, overrides=None) -> PipelineConfig:
    cfg = PipelineConfig()
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        cfg = apply_overrides(cfg, {"seed": env_seed})
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    argv: list = field(default_factory=list)
    version: str = __version__
    timing: dict = field(default_factory=dict)

    def add_input(self, path):
        p = Path(path)
        if p.is_file():
            self.inputs[str(path)] = file_sha256(p)
        elif p.is_dir():
            h = hashlib.sha256()
            for child in sorted(p.rglob("*")):
                # run records carry wall-clock timing, so they are not content
                if child.is_file() and not child.name.endswith(".manifest.json"):
                    h.update(str(child.relative_to(p)).encode())
                    h.update(file_sha256(child).encode())
            self.inputs[str(path)] = h.hexdigest()

    def add_output(self, path):
        self.outputs[str(path)] = file_sha256(path)

    def write(self, path, started: float | None = None) -> None:
        if started is not None:
            self.timing = {"wall_s": round(time.time() - started, 3),
                           "python": platform.python_version()}
        atomic_write_text(path, json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
