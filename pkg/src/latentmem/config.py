"""Training configuration: dataclass defaults plus a key = value file parser."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

ROOT_ENV_VAR = "LATENTMEM_ROOT"


def artifact_root() -> Path:
    return Path(os.environ.get(ROOT_ENV_VAR, "artifacts"))


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-3
    lam: float = 0.25  # distillation weight
    beta: float = 0.05  # stage-2 KL penalty
    g_rollouts: int = 4
    k: int = 8
    l_window: int = 3
    w_chunk: int = 4
    m_retrieve: int = 5
    cap: int = 12
    l_prime: int = 12
    seed: int = 0
    updates: int = 400
    batch: int = 8
    policy_path: str = ""
    policy_sidecar: str = ""
    bank_path: str = ""
    tasks_path: str = ""
    out_path: str = ""
    metrics_path: str = ""


_FLOAT_FIELDS = {"lr", "lam", "beta"}
_INT_FIELDS = {
    "stage",
    "g_rollouts",
    "k",
    "l_window",
    "w_chunk",
    "m_retrieve",
    "cap",
    "l_prime",
    "seed",
    "updates",
    "batch",
}


def parse_config_file(path) -> dict:
    """Parse 'key = value' lines; '#' starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict = {}
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line (need key = value): {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def make_train_config(overrides: dict) -> TrainConfig:
    valid = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig()
    for key, value in overrides.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _FLOAT_FIELDS:
            value = float(value)
        elif key in _INT_FIELDS:
            value = int(value)
        setattr(cfg, key, value)
    return cfg
