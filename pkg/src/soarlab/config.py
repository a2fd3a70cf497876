"""Flat text run configuration: "key = value" lines, '#' comments, a closed
key registry (unknown or duplicate keys are hard errors), canonical
serialization for run manifests, and constructors for the objects a run
needs (dataset spec, method config, optimizer settings).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import data as data_mod
from .errors import ConfigError, ContractViolation
from .flow import LossWeighting, NoiseSchedule
from .soar import RENOISE_MODES, T0_SAMPLING_MODES, SoarConfig
from .training import METHODS, TrainSettings


@dataclass
class RunConfig:
    """All run parameters; field names match config keys except lam <- lambda."""

    method: str = "soar"
    seed: int = 0
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    checkpoint_interval: int = 500

    K: int = 10
    N: int = 4
    M: int = 1
    lam: float = 1.0
    w_cfg: float = 1.0
    eta: float = 0.5
    renoise_mode: str = "shared-z1"
    sigma_min: float = 1e-3
    t0_sampling: str = "uniform-1overK-1"
    cond_dropout: float = 0.1

    weighting: str = "uniform"
    schedule: str = "identity"
    schedule_shift: float = 3.0

    dataset_kind: str = "gaussian-mixture"
    dataset_dim: int = 2
    dataset_conditions: int = 4
    dataset_radius: float = 4.0
    dataset_std: float = 0.3
    dataset_noise: float = 0.1
    dataset_point: str = "0.0,0.0"
    dataset_size: int = 4096

    hidden_width: int = 128
    hidden_depth: int = 3
    embed_dim: int = 8

    def soar_config(self) -> SoarConfig:
        return SoarConfig(
            K=self.K,
            N=self.N,
            M=self.M,
            lam=self.lam,
            w_cfg=self.w_cfg,
            eta=self.eta,
            renoise_mode=self.renoise_mode,
            sigma_min=self.sigma_min,
            t0_sampling=self.t0_sampling,
            cond_dropout=self.cond_dropout,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            dataset_size=self.dataset_size,
            hidden_width=self.hidden_width,
            hidden_depth=self.hidden_depth,
            embed_dim=self.embed_dim,
        )

    def dataset_spec(self) -> data_mod.DatasetSpec:
        kind = self.dataset_kind
        if kind == "gaussian-mixture":
            return data_mod.gaussian_mixture_spec(
                cond_count=self.dataset_conditions,
                dim=self.dataset_dim,
                radius=self.dataset_radius,
                std=self.dataset_std,
            )
        if kind == "two-moons":
            return data_mod.two_moons_spec(noise=self.dataset_noise)
        if kind == "checkerboard":
            return data_mod.checkerboard_spec(cond_count=self.dataset_conditions)
        if kind == "single-point":
            try:
                point = np.array([float(x) for x in self.dataset_point.split(",")])
            except ValueError:
                raise ConfigError(
                    f"dataset_point must be comma-separated numbers, got {self.dataset_point!r}",
                    key="dataset_point",
                )
            return data_mod.single_point_spec(point, cond_count=self.dataset_conditions)
        raise ConfigError(f"unknown dataset_kind {kind!r}", key="dataset_kind")

    def loss_weighting(self) -> LossWeighting:
        return LossWeighting(self.weighting)

    def noise_schedule(self) -> NoiseSchedule:
        if self.schedule == "identity":
            return NoiseSchedule("identity")
        return NoiseSchedule("shifted", shift=self.schedule_shift)


# config key -> (dataclass field, parse). "lambda" is the one key whose field
# name differs (keyword clash).
_ENUMS = {
    "method": METHODS,
    "renoise_mode": RENOISE_MODES,
    "t0_sampling": T0_SAMPLING_MODES,
    "weighting": ("uniform", "sigma-squared"),
    "schedule": ("identity", "shifted"),
    "dataset_kind": data_mod.DATASET_KINDS,
}


def _field_map():
    mapping = {}
    for f in fields(RunConfig):
        key = "lambda" if f.name == "lam" else f.name
        mapping[key] = (f.name, f.type)
    return mapping


KEY_FIELDS = _field_map()


def _parse_value(key: str, field_name: str, ftype: str, raw: str):
    raw = raw.strip()
    if key in _ENUMS:
        if raw not in _ENUMS[key]:
            raise ConfigError(
                f"config key {key!r}: {raw!r} is not one of {list(_ENUMS[key])}",
                key=key,
            )
        return raw
    if ftype == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: {raw!r} is not an integer", key=key)
    if ftype == "float":
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: {raw!r} is not a number", key=key)
        if not np.isfinite(value):
            raise ConfigError(f"config key {key!r} must be finite", key=key)
        return value
    return raw


def parse_config_lines(lines) -> dict:
    """Raw key -> value strings from 'key = value' lines.

    '#' starts a comment (full-line or trailing); blank lines are skipped;
    unknown and duplicate keys are errors carrying the offending key.
    """
    seen: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {text!r}")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in KEY_FIELDS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})", key=key)
        if key in seen:
            raise ConfigError(f"duplicate config key {key!r} (line {lineno})", key=key)
        seen[key] = raw
    return seen


def config_from_text(text: str, overrides=None) -> RunConfig:
    """RunConfig from config text plus optional 'key=value' override strings."""
    raw = parse_config_lines(text.splitlines())
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in KEY_FIELDS:
            raise ConfigError(f"unknown config key {key!r} (override)", key=key)
        raw[key] = value
    cfg = RunConfig()
    for key, value in raw.items():
        field_name, ftype = KEY_FIELDS[key]
        setattr(cfg, field_name, _parse_value(key, field_name, ftype, value))
    # fail fast on invalid combinations; surface them as config errors so the
    # CLI maps them to its config exit code
    try:
        cfg.soar_config()
        cfg.train_settings()
        cfg.dataset_spec()
        cfg.loss_weighting()
        cfg.noise_schedule()
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path, overrides=None) -> RunConfig:
    with open(path) as fh:
        return config_from_text(fh.read(), overrides)


def config_to_text(cfg: RunConfig) -> str:
    """Canonical serialization: every key, declaration order, repr floats.

    Parsing the output reproduces an identical RunConfig, which is what run
    manifests rely on.
    """
    lines = []
    for f in fields(RunConfig):
        key = "lambda" if f.name == "lam" else f.name
        value = getattr(cfg, f.name)
        text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
