"""Run configuration: defaults, YAML config files, and dotted-key overrides.

Effective config = defaults <- file <- --set overrides, and the merged result
is serialized into every run manifest so a run can be reproduced exactly.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

DEFAULTS: dict = {
    "dataset": {"num_samples": 4000, "seed": 0, "holdout_fraction": 0.1, "resolution": 16},
    "schedule": {"num_steps": 1000, "shape": "shifted-cosine"},
    "model": {"base_channels": 32, "cond_dim": 64, "time_dim": 64, "attn_heads": 2,
              "token_count": 8, "seed": 0},
    "pretrain": {"steps": 12000, "lr": 1.0e-3, "batch_size": 32, "cond_drop_prob": 0.1,
                 "seed": 0, "lr_schedule": "cosine"},
    "sr_train": {"steps": 4000, "lr": 1.0e-3, "batch_size": 16, "cond_drop_prob": 0.0,
                 "seed": 1, "lr_schedule": "cosine"},
    "scorer": {"steps": 2000, "lr": 1.0e-3, "batch_size": 64, "seed": 2,
               "accuracy_floor": 0.9},
    "oracle": {"steps": 1500, "lr": 2.0e-3, "batch_size": 64, "seed": 3,
               "label_smoothing": 0.1},
    "edit": {"embed_opt_steps": 100, "embed_lr": 1.0e-3, "embed_batch": 8,
             "finetune_steps": 1500, "finetune_lr": 1.0e-4, "finetune_batch": 4,
             "sr_finetune_batch": 2, "eta": 0.7, "seeds": [0, 1, 2, 3, 4],
             "guidance": 3.0, "sampler": "ddim", "inference_steps": 50,
             "validation_pairs": 64, "rec_psnr_floor": 18.0, "session_seed": 0},
    "sweep": {"etas": [round(0.1 * k, 1) for k in range(11)], "seeds": [0, 1]},
    "service": {"retry_after": 5, "max_sessions": 256},
}


def data_root() -> Path:
    return Path(os.environ.get("IMAGIC_HOME", str(Path.home() / ".spritedit")))


def device() -> str:
    return os.environ.get("IMAGIC_DEVICE", "cpu")


def load_config(path: Path | None = None, overrides: list[str] | None = None) -> dict:
    """Merge defaults, an optional YAML file, and ``key.path=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {path} must hold a mapping")
        _merge(cfg, loaded)
    for item in overrides or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} is not of the form key=value")
        set_by_path(cfg, key.strip(), yaml.safe_load(raw))
    return cfg


def _merge(base: dict, extra: dict) -> None:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def set_by_path(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def flatten(cfg: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in cfg.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, dotted + "."))
        else:
            out[dotted] = value
    return out


def dump_yaml(cfg: dict, path: Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
