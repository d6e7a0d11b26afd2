"""Human-readable configuration files (YAML) and config hashing."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import yaml

from .controllers import ControllerConfig
from .plant import CellParams, HighwayConfig, StationParams

__all__ = [
    "CONFIG_SCHEMA_VERSION",
    "ConfigError",
    "highway_to_dict",
    "highway_from_dict",
    "controller_to_dict",
    "controller_from_dict",
    "load_config",
    "save_config",
    "config_hash",
]

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed or inconsistent configuration file."""


def highway_to_dict(cfg: HighwayConfig) -> dict:
    return {
        "sample_time_s": cfg.sample_time_s,
        "cells": [
            {
                "length_km": c.length_km,
                "free_flow_speed": c.free_flow_speed,
                "congestion_wave_speed": c.congestion_wave_speed,
                "capacity": c.capacity,
                "jam_density": c.jam_density,
            }
            for c in cfg.cells
        ],
        "station": {
            "exit_cell": cfg.station.exit_cell,
            "merge_cell": cfg.station.merge_cell,
            "station_capacity": cfg.station.station_capacity,
            "queue_capacity": cfg.station.queue_capacity,
            "ramp_capacity": cfg.station.ramp_capacity,
            "service_delay_steps": cfg.station.service_delay_steps,
            "split_ratio": cfg.station.split_ratio,
            "mainstream_priority": cfg.station.mainstream_priority,
        },
    }


def highway_from_dict(data: dict) -> HighwayConfig:
    try:
        cells = tuple(CellParams(**c) for c in data["cells"])
        station = StationParams(**data["station"])
        return HighwayConfig(sample_time_s=float(data["sample_time_s"]),
                             cells=cells, station=station)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid highway configuration: {exc}") from exc


def controller_to_dict(ctrl: ControllerConfig) -> dict:
    return {
        "horizon": ctrl.horizon,
        "update_period": ctrl.update_period,
        "flow_reward": ctrl.flow_reward,
        "quad_scale": ctrl.quad_scale,
        "ilc_step": ctrl.ilc_step,
        "w_rho": ctrl.w_rho,
        "w_l": ctrl.w_l,
        "w_e": ctrl.w_e,
        "w_r": ctrl.w_r,
        "upstream_length_weight": ctrl.upstream_length_weight,
        "soft_queue_penalty": ctrl.soft_queue_penalty,
        "block_steps": ctrl.block_steps,
        "ilc_queue_margin": ctrl.ilc_queue_margin,
        "ilc_step_decay": ctrl.ilc_step_decay,
        "ilc_prox_reg": ctrl.ilc_prox_reg,
    }


def controller_from_dict(data: dict) -> ControllerConfig:
    try:
        return ControllerConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid controller configuration: {exc}") from exc


def load_config(path: str | Path) -> tuple[HighwayConfig, ControllerConfig]:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema version {version}")
    cfg = highway_from_dict(data)
    ctrl = controller_from_dict(data.get("controller", {}))
    return cfg, ctrl


def save_config(cfg: HighwayConfig, ctrl: ControllerConfig,
                path: str | Path) -> None:
    payload = {"schema_version": CONFIG_SCHEMA_VERSION}
    payload.update(highway_to_dict(cfg))
    payload["controller"] = controller_to_dict(ctrl)
    Path(path).write_text(yaml.safe_dump(payload, sort_keys=False))


def config_hash(cfg: HighwayConfig, ctrl: ControllerConfig | None = None
                ) -> str:
    """Stable digest of the configuration, used to seal experiment runs."""
    payload = highway_to_dict(cfg)
    if ctrl is not None:
        payload["controller"] = controller_to_dict(ctrl)
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
