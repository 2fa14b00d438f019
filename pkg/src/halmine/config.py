"""Declarative run configuration.

One YAML file drives a whole run. ``${VAR}`` references interpolate from the
environment at load time, then the resolved snapshot is hashed into the run
manifest, so a completed run records exactly what it ran with.
"""
from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Optional

import yaml

from .optimize import OptConfig
from .retrieval import FilterPolicy, RetrievalConfig
from .finetune import FinetuneConfig
from .types import ObjectSpec

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


DEFAULTS: dict = {
    "run_id": "run",
    "workdir": ".",
    "mode": "hallucination",
    "seed": 0,
    "workers": 1,
    "query_source": "both",           # llm | optimized | both
    "expected_query_count": 50,
    "objects": [],
    "thresholds": {
        "det_reject": 0.1,
        "det_accept": 0.5,
        "dedup": 0.9,
        "merge": 0.6,
        "det_floor": 0.05,
    },
    "retrieval": {
        "explore_k": 20,
        "exploit_k": 50,
        "overfetch_factor": 3,
        "max_fetch_retries": 2,
    },
    "clustering": {
        "min_cluster_size": 5,
    },
    "optimize": {
        "steps": 25,
        "base_step_size": 0.1,
        "warmup_steps": 3,
        "grad_clip_l2": 0.1,
        "latent_step_factor": 0.1,
        "start_timestep": 800,
        "regularizer_weight": 1.0,
    },
    "finetune": {
        "negatives_per_object": 200,
        "positives_per_object": 400,
        "seed": 0,
    },
    "benchmark": {
        "caps": [3, 50],
    },
    "adapters": {
        "kind": "stub",
        "stub": {"semantic_dim": 24, "perceptual_dim": 64, "latent_dim": 6},
    },
    "index": {"kind": "directory", "path": "", "pattern": "*"},
    "positives_manifest": "",
    "labels_path": "",
}


def interpolate_env(value):
    """Recursively substitute ${VAR} from the environment."""
    if isinstance(value, str):
        def sub(match):
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} is not set")
            return os.environ[name]
        return _ENV_REF.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate_env(v) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate_env(v) for v in value]
    return value


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Optional[Path] = None, overrides: Optional[dict] = None) -> dict:
    """Defaults, then the YAML file, then CLI overrides; env-interpolated."""
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a mapping")
        cfg = _deep_merge(cfg, raw)
    if overrides:
        cfg = _deep_merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    cfg = interpolate_env(cfg)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    thr = cfg["thresholds"]
    for name in ("det_reject", "det_accept", "dedup", "det_floor"):
        if not 0.0 < float(thr[name]) < 1.0:
            raise ConfigError(f"threshold {name} must lie in (0, 1)")
    if not 0.0 < float(thr["merge"]) <= 2.0:
        raise ConfigError("threshold merge must lie in (0, 2]")
    if cfg["mode"] not in ("hallucination", "reverse"):
        raise ConfigError(f"unknown mode {cfg['mode']!r}")
    if cfg["query_source"] not in ("llm", "optimized", "both"):
        raise ConfigError(f"unknown query_source {cfg['query_source']!r}")
    if int(cfg["workers"]) < 1:
        raise ConfigError("workers must be >= 1")
    for entry in cfg["objects"]:
        if isinstance(entry, dict) and "name" in entry:
            continue
        raise ConfigError(f"object entries need a name: {entry!r}")


def objects_from(cfg: dict, name_filter: Optional[list] = None) -> list:
    objects = []
    for entry in cfg["objects"]:
        try:
            obj = ObjectSpec(entry["name"], entry.get("dataset_tag", "openimages"),
                             entry.get("frequency_split"))
        except Exception as exc:
            raise ConfigError(f"bad object entry {entry!r}: {exc}") from exc
        objects.append(obj)
    if name_filter:
        wanted = {n.strip() for n in name_filter}
        objects = [o for o in objects if o.name in wanted]
        if not objects:
            raise ConfigError(f"no configured objects match filter {sorted(wanted)}")
    return objects


def filter_policy(cfg: dict) -> FilterPolicy:
    thr = cfg["thresholds"]
    return FilterPolicy(mode=cfg["mode"], det_reject=float(thr["det_reject"]),
                        det_accept=float(thr["det_accept"]))


def retrieval_config(cfg: dict) -> RetrievalConfig:
    r = cfg["retrieval"]
    return RetrievalConfig(
        explore_k=int(r["explore_k"]),
        exploit_k=int(r["exploit_k"]),
        dedup_threshold=float(cfg["thresholds"]["dedup"]),
        overfetch_factor=int(r["overfetch_factor"]),
        max_fetch_retries=int(r["max_fetch_retries"]),
    )


def opt_config(cfg: dict) -> OptConfig:
    o = cfg["optimize"]
    return OptConfig(
        steps=int(o["steps"]),
        base_step_size=float(o["base_step_size"]),
        warmup_steps=int(o["warmup_steps"]),
        grad_clip_l2=float(o["grad_clip_l2"]),
        latent_step_factor=float(o["latent_step_factor"]),
        det_floor=float(cfg["thresholds"]["det_floor"]),
        start_timestep=int(o["start_timestep"]),
        regularizer_weight=float(o["regularizer_weight"]),
    )


def finetune_config(cfg: dict) -> FinetuneConfig:
    f = cfg["finetune"]
    return FinetuneConfig(
        negatives_per_object=int(f["negatives_per_object"]),
        positives_per_object=int(f["positives_per_object"]),
        seed=int(f.get("seed", cfg["seed"])),
    )


def dump_example_config(path: Path, **overrides) -> None:
    cfg = _deep_merge(DEFAULTS, overrides)
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
