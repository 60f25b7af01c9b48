"""Run configuration: TOML file with command-line overrides.

Precedence is built-in defaults < config file < flags.  Unknown keys in
the file are rejected so typos fail loudly instead of silently running
with defaults.
"""

from __future__ import annotations

import copy
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .pipeline import AugmentationParams, PipelineConfig
from .pose_solver import RansacParams

DEFAULTS: dict = {
    "scene": {
        "path": "",
    },
    "augmentation": {
        "offsets": ["front", "back", "left", "right"],
        "offset_distance": 2.5,
        "yaw_steps": 12,
        "yaw_increment_deg": 30.0,
        "min_coverage": 0.2,
        "min_keypoints": 50,
        "tau_occ": 0.05,
        "num_sources": 4,
        "source_rotation_weight": 3.0,
    },
    "retrieval": {
        "k": 10,
    },
    "matching": {
        "ratio": 0.8,
        "min_matches_per_view": 0,
    },
    "ransac": {
        "max_iterations": 10000,
        "inlier_threshold": 3.0,
        "confidence": 0.999,
    },
    "features": {
        "gem_p": 3.0,
        "max_keypoints": 1024,
    },
    "pipeline": {
        "refine": True,
        "refine_iters": 1,
        "feature_mode": "deterministic",
        "student_path": "",
    },
    "run": {
        "seed": 0,
        "threads": 1,
        "output": "",
    },
}


def _check_keys(loaded: dict, reference: dict, prefix: str = "") -> None:
    for key, value in loaded.items():
        if key not in reference:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        if isinstance(reference[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix}{key!r} must be a table")
            _check_keys(value, reference[key], prefix=f"{prefix}{key}.")


def load_config(path=None) -> dict:
    """Defaults overlaid with a TOML file, unknown keys rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        with open(Path(path), "rb") as fh:
            loaded = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from exc
    _check_keys(loaded, DEFAULTS)
    for section, values in loaded.items():
        cfg[section].update(values)
    return cfg


def set_override(cfg: dict, dotted: str, value) -> None:
    """Apply one `section.key` override, skipping None values."""
    if value is None:
        return
    section, key = dotted.split(".", 1)
    if section not in cfg or key not in cfg[section]:
        raise ConfigError(f"unknown config key {dotted!r}")
    cfg[section][key] = value


def pipeline_config(cfg: dict, student=None, threads: int | None = None,
                    seed: int | None = None) -> PipelineConfig:
    aug = cfg["augmentation"]
    run_seed = cfg["run"]["seed"] if seed is None else seed
    return PipelineConfig(
        retrieval_k=int(cfg["retrieval"]["k"]),
        match_ratio=float(cfg["matching"]["ratio"]),
        min_matches_per_view=int(cfg["matching"]["min_matches_per_view"]),
        ransac=RansacParams(
            max_iterations=int(cfg["ransac"]["max_iterations"]),
            inlier_threshold=float(cfg["ransac"]["inlier_threshold"]),
            confidence=float(cfg["ransac"]["confidence"]),
            seed=int(run_seed)),
        gem_p=float(cfg["features"]["gem_p"]),
        max_keypoints=int(cfg["features"]["max_keypoints"]),
        feature_mode=cfg["pipeline"]["feature_mode"],
        student=student,
        refine=bool(cfg["pipeline"]["refine"]),
        refine_iters=int(cfg["pipeline"]["refine_iters"]),
        augmentation=AugmentationParams(
            offsets=tuple(aug["offsets"]),
            offset_distance=float(aug["offset_distance"]),
            yaw_steps=int(aug["yaw_steps"]),
            yaw_increment_deg=float(aug["yaw_increment_deg"]),
            min_coverage=float(aug["min_coverage"]),
            min_keypoints=int(aug["min_keypoints"]),
            tau_occ=float(aug["tau_occ"]),
            num_sources=int(aug["num_sources"]),
            source_rotation_weight=float(aug["source_rotation_weight"])),
        threads=int(cfg["run"]["threads"] if threads is None else threads),
    )
