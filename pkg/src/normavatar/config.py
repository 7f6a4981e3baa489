"""Pipeline configuration: one YAML file, strict keys, env overrides, and a
content fingerprint stamped into every artifact.

Environment variables prefixed NORMAVATAR_ override file values, spelled
NORMAVATAR_<SECTION>__<KEY> (for example NORMAVATAR_GAN__STEPS=50).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from .dataset import BootstrapConfig, FitConfig
from .invert import InversionConfig
from .nets import GanConfig
from .percept import EmbedderConfig
from .refine import RefineConfig
from .regress import CameraConfig, RegressorConfig


class ConfigError(Exception):
    pass


ENV_PREFIX = "NORMAVATAR_"


@dataclass
class GeometryConfig:
    grid_rows: int = 27
    grid_cols: int = 54
    map_size: int = 64
    render_size: int = 128
    render_sigma: float = 0.35


@dataclass
class DataConfig:
    train_identities: int = 128
    eval_identities: int = 64
    expanded_records: int = 256
    beta_pairs: int = 50
    pose_variants: int = 3
    expressive_variants: int = 1
    eval_consistency_identities: int = 8
    eval_consistency_variants: int = 5


@dataclass
class EvalConfig:
    inversion_benchmark_targets: int = 16
    regression_benchmark_identities: int = 16
    recovery_cases: int = 20
    neutralization_cases: int = 20
    camera_benchmark_renders: int = 100
    embedder_benchmark_identities: int = 32
    held_out_gan_maps: int = 64


@dataclass
class PipelineConfig:
    seed: int = 1234
    out: str = "runs/desk"
    workers: int = 0  # 0 means use the machine's CPU count
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    data: DataConfig = field(default_factory=DataConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    pairs_inversion: InversionConfig = field(default_factory=lambda: InversionConfig(
        iterations=200))
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def fingerprint(self):
        blob = json.dumps(to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def n_workers(self):
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


def to_dict(cfg):
    if dataclasses.is_dataclass(cfg):
        return {f.name: to_dict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    if isinstance(cfg, (list, tuple)):
        return [to_dict(v) for v in cfg]
    if isinstance(cfg, (int, float, str, bool)) or cfg is None:
        return cfg
    raise ConfigError(f"unserializable config value {cfg!r}")


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, type)
                                                and dataclasses.is_dataclass(f.type)):
            kwargs[name] = _from_dict(f.type, value, f"{path}.{name}")
        else:
            default = getattr(cls(), name) if not dataclasses.is_dataclass(f.type) else None
            if isinstance(default, tuple) and isinstance(value, list):
                value = tuple(value)
            kwargs[name] = value
    return cls(**kwargs)


def _merge_section(cfg, section_name, data):
    section = getattr(cfg, section_name)
    if dataclasses.is_dataclass(section):
        merged = _from_dict(type(section), {**_shallow_dict(section), **data},
                            section_name)
        setattr(cfg, section_name, merged)
    else:
        setattr(cfg, section_name, data)


def _shallow_dict(dc):
    out = {}
    for f in dataclasses.fields(dc):
        v = getattr(dc, f.name)
        out[f.name] = v
    return out


def load_config(path=None, overrides=None, env=None):
    """Build a PipelineConfig from YAML, env vars, and explicit overrides.

    Unknown keys anywhere raise ConfigError. `overrides` is a flat dict of
    "section.key" (or "key") strings applied last.
    """
    cfg = PipelineConfig()
    if path:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        top_fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
        unknown = set(data) - set(top_fields)
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        for name, value in data.items():
            if dataclasses.is_dataclass(getattr(cfg, name)):
                _merge_section(cfg, name, value or {})
            else:
                setattr(cfg, name, value)

    env = os.environ if env is None else env
    for key, raw in sorted(env.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        spec = key[len(ENV_PREFIX):].lower()
        _apply_override(cfg, spec.replace("__", "."), raw)

    for spec, value in (overrides or {}).items():
        _apply_override(cfg, spec, value)
    return cfg


def _apply_override(cfg, spec, raw):
    parts = spec.split(".")
    target = cfg
    for p in parts[:-1]:
        if not hasattr(target, p):
            raise ConfigError(f"unknown config section {p!r} in {spec!r}")
        target = getattr(target, p)
    leaf = parts[-1]
    if not hasattr(target, leaf):
        raise ConfigError(f"unknown config key {spec!r}")
    current = getattr(target, leaf)
    if isinstance(raw, str):
        value = yaml.safe_load(raw)
    else:
        value = raw
    if isinstance(current, tuple) and isinstance(value, list):
        value = tuple(value)
    if isinstance(current, bool):
        value = bool(value)
    elif isinstance(current, int) and not isinstance(value, bool) and value is not None:
        value = int(value)
    elif isinstance(current, float) and value is not None:
        value = float(value)
    setattr(target, leaf, value)


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True)
    return path
