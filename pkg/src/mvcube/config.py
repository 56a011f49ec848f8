"""Run configuration shared by all commands.

Defaults are the reference operating points: inference margin -0.025, CFG
scale 7.5 for 2D sampling and 50 (with 0.5 std rescale) for lifting, 50 DDIM
steps over a 1000-step linear schedule, 10% condition dropout, training
margin range [-0.1, 0.1], lift annealing from 0.98 down to (0.02, 0.5) over
the first 80% of steps. Resolution order: CLI flag > config file > default.
The fully resolved config is echoed into every run's sidecar.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1

    # dataset
    n_scenes: int = 256

    # diffusion schedule
    t_total: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    # 2D training
    train_steps: int = 20000
    lr: float = 1e-4
    weight_decay: float = 1e-2
    scenes_per_batch: int = 1
    dropout: float = 0.1
    margin_low: float = -0.1
    margin_high: float = 0.1
    ckpt_every: int = 2000

    # 2D sampling
    policy: str = "adaptive"
    margin: float = -0.025
    cfg_scale: float = 7.5
    sample_steps: int = 50
    rescale: float = 0.0

    # evaluation
    n_prompts: int = 32
    n_seeds: int = 8
    batch_jobs: int = 8
    margins: str = "-0.1,-0.05,-0.025,0,0.025,0.05,0.1"
    body_in_views: bool = True

    # 3D lifting
    lift_steps: int = 1000
    lift_lr: float = 0.01
    lift_cfg_scale: float = 50.0
    lift_rescale: float = 0.5
    grid_n: int = 32
    res_low: int = 16
    res_high: int = 32
    ray_samples: int = 64
    anneal_frac: float = 0.8
    anneal_start: float = 0.98
    anneal_max_end: float = 0.5
    anneal_min_end: float = 0.02


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value):
    typ = _FIELDS[key].type
    try:
        if typ in ("int", int):
            if isinstance(value, str):
                value = value.strip()
            out = int(value)
        elif typ in ("float", float):
            out = float(value)
        elif typ in ("bool", bool):
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("1", "true", "yes"):
                return True
            if str(value).lower() in ("0", "false", "no"):
                return False
            raise ValueError(value)
        else:
            out = str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} expects {typ}, got {value!r}") from None
    return out


def parse_config_file(path: str) -> dict:
    """JSON object or flat key=value lines."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return data
    data = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        data[key.strip()] = value.strip()
    return data


def resolve_config(flags: dict | None = None, file_path: str | None = None) -> RunConfig:
    """Apply precedence CLI flag > config file > default; reject unknown keys."""
    merged = {}
    if file_path:
        for key, value in parse_config_file(file_path).items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value)
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _coerce(key, value)
    return RunConfig(**merged)


def config_json(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def margin_list(config: RunConfig) -> list[float]:
    return [float(m) for m in str(config.margins).split(",") if m.strip() != ""]
