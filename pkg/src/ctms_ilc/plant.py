"""Discrete-time CTM-s plant: a highway stretch with one service station.

The stretch is divided into N cells with a triangular fundamental diagram.
A service station taps a fixed share of the outflow of an exit cell, holds
vehicles for a fixed number of sampling intervals, and releases them through
an exit queue that merges back into the mainstream at a downstream cell.
The merge-back flow can be restricted by a metering command.

All rates are in veh/h, lengths in km, densities in veh/km and occupancies
in veh. Internally every rate * time product uses the sampling time in
hours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "CellParams",
    "StationParams",
    "HighwayConfig",
    "DemandProfile",
    "PlantState",
    "StepOutput",
    "Trajectory",
    "PlantFault",
    "cell_demand",
    "cell_supply",
    "station_demand",
    "step",
    "simulate",
]


class PlantFault(RuntimeError):
    """Raised when the plant produces an invalid intermediate value.

    Signals an inconsistent configuration or corrupted state, never a
    recoverable runtime condition.
    """


@dataclass(frozen=True)
class CellParams:
    """Physical parameters of one highway cell (triangular diagram)."""

    length_km: float
    free_flow_speed: float
    congestion_wave_speed: float
    capacity: float
    jam_density: float

    def __post_init__(self):
        for name in ("length_km", "free_flow_speed", "congestion_wave_speed",
                     "capacity", "jam_density"):
            if not getattr(self, name) > 0:
                raise ValueError(f"CellParams.{name} must be strictly positive")
        if self.free_flow_speed * self.jam_density <= self.capacity:
            raise ValueError(
                "triangular fundamental diagram requires "
                "free_flow_speed * jam_density > capacity")


@dataclass(frozen=True)
class StationParams:
    """Service station between an exit cell and a downstream merge cell."""

    exit_cell: int
    merge_cell: int
    station_capacity: float   # veh, storage inside the station
    queue_capacity: float     # veh, exit queue limit used by the controller
    ramp_capacity: float      # veh/h, merge-back ramp limit
    service_delay_steps: int  # sampling intervals spent inside the station
    split_ratio: float        # share of exit-cell outflow entering the station
    mainstream_priority: float

    def __post_init__(self):
        if self.exit_cell < 0 or self.merge_cell <= self.exit_cell:
            raise ValueError("station requires 0 <= exit_cell < merge_cell")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if not 0 < self.mainstream_priority < 1:
            raise ValueError("mainstream_priority must lie in (0, 1)")
        if self.station_capacity <= 0 or self.queue_capacity <= 0:
            raise ValueError("station and queue capacities must be positive")
        if self.ramp_capacity <= 0:
            raise ValueError("ramp_capacity must be positive")
        if self.service_delay_steps < 1:
            raise ValueError("service_delay_steps must be a positive integer")


@dataclass(frozen=True)
class HighwayConfig:
    """Immutable description of the stretch: cells, station, sampling time."""

    sample_time_s: float
    cells: tuple[CellParams, ...]
    station: StationParams

    def __post_init__(self):
        if self.sample_time_s <= 0:
            raise ValueError("sample_time_s must be positive")
        object.__setattr__(self, "cells", tuple(self.cells))
        if len(self.cells) < 2:
            raise ValueError("need at least two cells")
        if self.station.merge_cell >= len(self.cells):
            raise ValueError("merge_cell out of range")

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def sample_time_h(self) -> float:
        return self.sample_time_s / 3600.0

    @property
    def lengths(self) -> np.ndarray:
        return np.array([c.length_km for c in self.cells])


@dataclass(frozen=True)
class DemandProfile:
    """Exogenous upstream demand, one value per time step [veh/h]."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1:
            raise ValueError("demand profile must be one-dimensional")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("demand values must be finite and nonnegative")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def at(self, k: int) -> float:
        """Demand at step k; past the end, the last value is held (tail rule)."""
        if k < 0:
            raise IndexError("negative demand step")
        if k >= len(self.values):
            return float(self.values[-1])
        return float(self.values[k])


@dataclass
class PlantState:
    """Simulated truth at one time step.

    ``inflow_history`` holds the last ``service_delay_steps`` station inflows,
    oldest first; the oldest entry is the flow currently leaving service for
    the exit queue.  ``prev_exit_cell_outflow`` is the total outflow of the
    exit cell during the previous interval, which fixes the station inflow of
    the current one.
    """

    densities: np.ndarray
    in_station: float
    exit_queue: float
    inflow_history: np.ndarray
    prev_exit_cell_outflow: float

    @classmethod
    def empty(cls, cfg: HighwayConfig) -> "PlantState":
        """All-zero state: empty highway, empty station, empty queue."""
        return cls(
            densities=np.zeros(cfg.n_cells),
            in_station=0.0,
            exit_queue=0.0,
            inflow_history=np.zeros(cfg.station.service_delay_steps),
            prev_exit_cell_outflow=0.0,
        )

    def validate(self, cfg: HighwayConfig) -> None:
        if self.densities.shape != (cfg.n_cells,):
            raise ValueError("densities length does not match config")
        for i, cell in enumerate(cfg.cells):
            if not -1e-9 <= self.densities[i] <= cell.jam_density + 1e-9:
                raise ValueError(f"density of cell {i} outside [0, jam]")
        if self.in_station < 0 or self.exit_queue < 0:
            raise ValueError("station occupancy and queue must be nonnegative")
        if self.inflow_history.shape != (cfg.station.service_delay_steps,):
            raise ValueError("inflow history must hold exactly delay entries")
        if np.any(self.inflow_history < 0):
            raise ValueError("inflow history entries must be nonnegative")
        if self.prev_exit_cell_outflow < 0:
            raise ValueError("previous exit-cell outflow must be nonnegative")

    def copy(self) -> "PlantState":
        return PlantState(self.densities.copy(), self.in_station,
                          self.exit_queue, self.inflow_history.copy(),
                          self.prev_exit_cell_outflow)


@dataclass
class StepOutput:
    """All flows realized during one sampling interval."""

    interface_flows: np.ndarray   # phi_0 .. phi_N, length N+1
    station_inflow: float         # s(k)
    station_outflow: float        # r(k)
    service_to_queue_flow: float  # flow leaving service for the exit queue
    demands: np.ndarray           # per-cell demand, length N
    station_demand_value: float
    supplies: np.ndarray          # per-cell supply, length N


@dataclass
class Trajectory:
    """Closed- or open-loop run: steps+1 states and steps outputs."""

    states: list[PlantState]
    outputs: list[StepOutput]

    def __len__(self) -> int:
        return len(self.outputs)

    def density_matrix(self) -> np.ndarray:
        return np.array([s.densities for s in self.states])

    def exit_queues(self) -> np.ndarray:
        return np.array([s.exit_queue for s in self.states])

    def in_station_counts(self) -> np.ndarray:
        return np.array([s.in_station for s in self.states])


def cell_demand(i: int, state: PlantState, cfg: HighwayConfig) -> float:
    """Maximum flow cell i can send downstream [veh/h].

    At the station's exit cell the diverted share is removed before
    comparing with the capacity.
    """
    if not 0 <= i < cfg.n_cells:
        raise IndexError(f"cell index {i} out of range")
    cell = cfg.cells[i]
    beta = cfg.station.split_ratio if i == cfg.station.exit_cell else 0.0
    return min((1.0 - beta) * cell.free_flow_speed * state.densities[i],
               cell.capacity)


def cell_supply(i: int, state: PlantState, cfg: HighwayConfig) -> float:
    """Maximum flow cell i can accept from upstream [veh/h]."""
    if not 0 <= i < cfg.n_cells:
        raise IndexError(f"cell index {i} out of range")
    cell = cfg.cells[i]
    return min(cell.congestion_wave_speed * (cell.jam_density - state.densities[i]),
               cell.capacity)


def station_demand(state: PlantState, cfg: HighwayConfig,
                   metering: Optional[float] = None) -> float:
    """Maximum flow that can leave the station's exit queue [veh/h].

    The queue content can drain within one interval, capped by the ramp
    capacity and, when active, by the metering command.
    """
    if metering is not None and metering < 0:
        raise ValueError("metering command must be nonnegative")
    service_to_queue = float(state.inflow_history[0])
    d = min(service_to_queue + state.exit_queue / cfg.sample_time_h,
            cfg.station.ramp_capacity)
    if metering is not None:
        d = min(d, metering)
    return d


def step(state: PlantState, upstream_demand: float,
         metering: Optional[float], cfg: HighwayConfig
         ) -> tuple[PlantState, StepOutput]:
    """Advance the plant by one sampling interval.

    Station inflow is the diverted share of the exit cell's outflow of the
    previous interval; the flow from service to queue is the station inflow
    of ``service_delay_steps`` intervals ago.
    """
    if upstream_demand < 0:
        raise ValueError("upstream demand must be nonnegative")
    n = cfg.n_cells
    st = cfg.station
    T = cfg.sample_time_h
    lengths = cfg.lengths

    s_in = st.split_ratio * state.prev_exit_cell_outflow
    service_to_queue = float(state.inflow_history[0])

    demands = np.array([cell_demand(i, state, cfg) for i in range(n)])
    supplies = np.array([cell_supply(i, state, cfg) for i in range(n)])
    d_station = station_demand(state, cfg, metering)

    j = st.merge_cell
    p_ms = st.mainstream_priority
    phi = np.zeros(n + 1)
    for i in range(n + 1):
        upstream = upstream_demand if i == 0 else demands[i - 1]
        if i == n:
            phi[i] = upstream  # no downstream bottleneck past the stretch
        elif i == j:
            s_ms = max(supplies[j] - d_station, p_ms * supplies[j])
            phi[i] = min(upstream, s_ms)
        else:
            phi[i] = min(upstream, supplies[i])
    s_ramp_supply = max(supplies[j] - phi[j], (1.0 - p_ms) * supplies[j])
    r_out = min(d_station, s_ramp_supply)

    new_rho = state.densities.copy()
    for i in range(n):
        inflow = phi[i] + (r_out if i == j else 0.0)
        outflow = phi[i + 1] + (s_in if i == st.exit_cell else 0.0)
        new_rho[i] += T / lengths[i] * (inflow - outflow)
    new_l = state.in_station + T * (s_in - service_to_queue)
    new_e = state.exit_queue + T * (service_to_queue - r_out)

    out = StepOutput(
        interface_flows=phi,
        station_inflow=s_in,
        station_outflow=r_out,
        service_to_queue_flow=service_to_queue,
        demands=demands,
        station_demand_value=d_station,
        supplies=supplies,
    )

    if (np.any(~np.isfinite(new_rho)) or np.any(new_rho < -1e-9)
            or not math.isfinite(new_l) or new_l < -1e-9
            or not math.isfinite(new_e) or new_e < -1e-9):
        raise PlantFault(
            "invalid plant update (negative or non-finite state); "
            f"densities={new_rho}, in_station={new_l}, exit_queue={new_e}, "
            f"flows={phi}, s={s_in}, r={r_out}")

    new_state = PlantState(
        densities=np.maximum(new_rho, 0.0),
        in_station=max(new_l, 0.0),
        exit_queue=max(new_e, 0.0),
        inflow_history=np.append(state.inflow_history[1:], s_in),
        prev_exit_cell_outflow=phi[st.exit_cell + 1] + s_in,
    )
    return new_state, out


PolicyFn = Callable[[PlantState, int], Optional[float]]


def simulate(cfg: HighwayConfig, demand: DemandProfile,
             policy: Optional[PolicyFn], initial: PlantState,
             steps: int) -> Trajectory:
    """Drive the plant for ``steps`` intervals under a metering policy.

    ``policy`` is called with the current state and step index and returns
    the metering command, or None for unmetered operation.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if steps > len(demand):
        raise ValueError("demand profile shorter than requested horizon")
    state = initial.copy()
    states = [state]
    outputs: list[StepOutput] = []
    for k in range(steps):
        command = policy(state, k) if policy is not None else None
        state, out = step(state, demand.at(k), command, cfg)
        states.append(state)
        outputs.append(out)
    return Trajectory(states=states, outputs=outputs)
