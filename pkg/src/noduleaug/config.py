"""Run-configuration profiles and resolution.

Two built-in profiles: `paper` carries the published hyperparameters
(6M-step GAN schedule, batch 16, the 160x176x224 detector at its 40k-step
schedule); `desk` carries CI-scale values that finish on a laptop CPU.
Precedence when resolving: explicit flags > config file > profile.
Every run writes the fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

from .errors import ConfigurationError

PROFILES: dict[str, dict[str, dict[str, Any]]] = {
    "paper": {
        "gan": {
            "total_steps": 6_000_000,
            "batch_size": 16,
            "learning_rate": 2.0e-4,
            "beta1": 0.5,
            "beta2": 0.9,
            "label_flip_period": 3,
            "mode": "no_l1",
            "base_channels": 32,
            "gp_weight": 10.0,
        },
        "detector": {
            "input_shape": [160, 176, 224],
            "base_channels": 32,
            "extra_blocks": 6,
            "anchor_sizes": [8, 16, 32],
            "batch_size": 2,
            "learning_rate": 1.0e-3,
            "lr_drop_step": 20_000,
            "learning_rate_after_drop": 1.0e-4,
            "momentum": 0.9,
            "total_steps": 40_000,
            "val_window": [30_000, 40_000],
            "val_every": 2_000,
            "da_shift": 0.15,
            "da_zoom": 0.15,
        },
        "blend": {"shell_depth": 3, "iterations": 5},
        "phantom": {"shape": [160, 176, 224], "n_nodules": 4, "n_scans": 32},
        "evaluation": {"iou_threshold": 0.25, "tsne_perplexity": 100, "tsne_iterations": 1000},
    },
    "desk": {
        "gan": {
            "total_steps": 2_000,
            "batch_size": 2,
            "learning_rate": 2.0e-4,
            "beta1": 0.5,
            "beta2": 0.9,
            "label_flip_period": 3,
            "mode": "no_l1",
            "base_channels": 4,
            "gp_weight": 10.0,
        },
        "detector": {
            "input_shape": [64, 64, 96],
            "base_channels": 16,
            "extra_blocks": 2,
            "anchor_sizes": [8, 16, 32],
            "batch_size": 2,
            "learning_rate": 1.0e-3,
            "lr_drop_step": 400,
            "learning_rate_after_drop": 1.0e-4,
            "momentum": 0.9,
            "total_steps": 500,
            "val_window": [300, 500],
            "val_every": 100,
            "da_shift": 0.15,
            "da_zoom": 0.15,
        },
        "blend": {"shell_depth": 3, "iterations": 5},
        "phantom": {"shape": [64, 96, 96], "n_nodules": 3, "n_scans": 12},
        "evaluation": {"iou_threshold": 0.25, "tsne_perplexity": 30, "tsne_iterations": 1000},
    },
}


def resolve_config(profile: str = "desk",
                   config_file: str | Path | None = None,
                   overrides: dict[str, dict[str, Any]] | None = None) -> dict[str, Any]:
    """Merge profile defaults, optional JSON file, and explicit overrides."""
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    resolved = json.loads(json.dumps(PROFILES[profile]))  # deep copy
    resolved["profile"] = profile

    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        for section, values in file_cfg.items():
            if section == "profile":
                continue
            if not isinstance(values, dict):
                raise ConfigurationError(f"config section {section!r} must be an object")
            resolved.setdefault(section, {}).update(values)

    for section, values in (overrides or {}).items():
        filtered = {k: v for k, v in values.items() if v is not None}
        resolved.setdefault(section, {}).update(filtered)
    return resolved


def config_hash(resolved: dict[str, Any]) -> str:
    return hashlib.sha1(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:16]


def write_resolved(resolved: dict[str, Any], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.json"
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    return path
