"""Shared fixtures: small hand-checkable configs and the shipped scenario."""

from pathlib import Path

import numpy as np
import pytest

from ctms_ilc.configfile import load_config
from ctms_ilc.demand import load_demand_csv
from ctms_ilc.plant import CellParams, HighwayConfig, StationParams

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def make_small_config(n_cells: int = 3, exit_cell: int = 0,
                      merge_cell: int = 2, split_ratio: float = 0.2,
                      delay_steps: int = 2,
                      mainstream_priority: float = 0.8) -> HighwayConfig:
    """Uniform small stretch: 1 km cells, v=100, w=25, cap 1500, jam 100."""
    cell = CellParams(length_km=1.0, free_flow_speed=100.0,
                      congestion_wave_speed=25.0, capacity=1500.0,
                      jam_density=100.0)
    station = StationParams(
        exit_cell=exit_cell, merge_cell=merge_cell, station_capacity=100.0,
        queue_capacity=10.0, ramp_capacity=900.0,
        service_delay_steps=delay_steps, split_ratio=split_ratio,
        mainstream_priority=mainstream_priority)
    return HighwayConfig(sample_time_s=10.0, cells=(cell,) * n_cells,
                         station=station)


def random_config(rng: np.random.Generator, n_cells: int,
                  delay_steps: int) -> HighwayConfig:
    cells = tuple(
        CellParams(length_km=float(rng.uniform(0.3, 1.2)),
                   free_flow_speed=float(rng.uniform(80, 120)),
                   congestion_wave_speed=float(rng.uniform(20, 40)),
                   capacity=float(rng.uniform(1400, 2100)),
                   jam_density=float(rng.uniform(60, 100)))
        for _ in range(n_cells))
    exit_cell = int(rng.integers(0, n_cells - 1))
    merge_cell = int(rng.integers(exit_cell + 1, n_cells))
    station = StationParams(
        exit_cell=exit_cell, merge_cell=merge_cell,
        station_capacity=float(rng.uniform(100, 500)),
        queue_capacity=float(rng.uniform(10, 40)),
        ramp_capacity=float(rng.uniform(800, 1600)),
        service_delay_steps=delay_steps,
        split_ratio=float(rng.uniform(0.05, 0.3)),
        mainstream_priority=float(rng.uniform(0.6, 0.95)))
    return HighwayConfig(sample_time_s=10.0, cells=cells, station=station)


@pytest.fixture(scope="session")
def table3():
    cfg, ctrl = load_config(CONFIG_DIR / "table3.cfg")
    return cfg, ctrl


@pytest.fixture(scope="session")
def peak_demand():
    return load_demand_csv(CONFIG_DIR / "demand_peak.csv")
