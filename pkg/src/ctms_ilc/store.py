"""On-disk persistence of per-day iteration records.

Layout (one directory per scenario):

    <root>/<scenario_id>/
        manifest.json   # schema version, config hash, scalings, day count
        day_000.csv     # one file per day, sealed once written
        day_001.csv
        ...

Day files hold one row per step with full float precision (repr), so a
load reproduces every numeric sequence bit-exactly. The final row carries
only the terminal state (input columns empty). The manifest is updated
with a write-then-rename so a crash never leaves a half-written index.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .controllers import IterationRecord, WindowSlice, slice_record_window
from .plant import HighwayConfig

__all__ = [
    "STORE_SCHEMA_VERSION",
    "StoreError",
    "ExperimentLayout",
    "save_day",
    "load_day",
    "load_window",
]

STORE_SCHEMA_VERSION = 1


class StoreError(RuntimeError):
    """Inconsistent or corrupted experiment directory."""


@dataclass
class ExperimentLayout:
    """Handle to one scenario directory."""

    root: Path
    scenario_id: str
    config_hash: str
    scalings: dict            # {"r_beta": ..., "r_delta": ..., "r_demand": ...}
    controller_kind: str
    highway: dict             # serialized highway config, for window slicing
    day_count: int = 0

    @property
    def directory(self) -> Path:
        return Path(self.root) / self.scenario_id

    @property
    def manifest_path(self) -> Path:
        return self.directory / "manifest.json"

    def day_path(self, day: int) -> Path:
        return self.directory / f"day_{day:03d}.csv"

    @classmethod
    def create(cls, root, scenario_id: str, config_hash: str,
               scalings: dict, controller_kind: str,
               highway: dict) -> "ExperimentLayout":
        layout = cls(root=Path(root), scenario_id=scenario_id,
                     config_hash=config_hash, scalings=dict(scalings),
                     controller_kind=controller_kind, highway=highway)
        if layout.manifest_path.exists():
            raise StoreError(f"scenario {scenario_id!r} already exists under "
                             f"{root}; sealed runs are never rewritten")
        layout.directory.mkdir(parents=True, exist_ok=True)
        layout._write_manifest()
        return layout

    @classmethod
    def open(cls, directory) -> "ExperimentLayout":
        directory = Path(directory)
        manifest = directory / "manifest.json"
        if not manifest.exists():
            raise StoreError(f"no manifest in {directory}")
        data = json.loads(manifest.read_text())
        if data.get("schema_version") != STORE_SCHEMA_VERSION:
            raise StoreError(f"unsupported store schema in {manifest}")
        layout = cls(root=directory.parent, scenario_id=data["scenario_id"],
                     config_hash=data["config_hash"],
                     scalings=data["scalings"],
                     controller_kind=data["controller_kind"],
                     highway=data["highway"],
                     day_count=data["day_count"])
        for d in range(layout.day_count):
            if not layout.day_path(d).exists():
                raise StoreError(f"manifest lists day {d} but "
                                 f"{layout.day_path(d)} is missing")
        return layout

    def _write_manifest(self) -> None:
        payload = {
            "schema_version": STORE_SCHEMA_VERSION,
            "scenario_id": self.scenario_id,
            "config_hash": self.config_hash,
            "scalings": self.scalings,
            "controller_kind": self.controller_kind,
            "highway": self.highway,
            "day_count": self.day_count,
        }
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
        os.replace(tmp, self.manifest_path)


def _day_header(n_cells: int) -> list[str]:
    cols = ["step"]
    cols += [f"density_{i}" for i in range(n_cells)]
    cols += ["in_station", "exit_queue"]
    cols += [f"flow_{i}" for i in range(n_cells + 1)]
    cols += ["ramp_outflow", "service_flow", "station_inflow",
             "upstream_demand", "metering"]
    return cols


def save_day(layout: ExperimentLayout, record: IterationRecord,
             config_hash: Optional[str] = None) -> None:
    """Append one day to the scenario; days must arrive in order."""
    if config_hash is not None and config_hash != layout.config_hash:
        raise StoreError("config hash mismatch: refusing to mix days from "
                         "different configurations in one scenario")
    if record.day_index != layout.day_count:
        raise StoreError(f"expected day {layout.day_count}, got "
                         f"{record.day_index}; days must be contiguous")
    n_cells = record.states.shape[1] - 2
    path = layout.day_path(record.day_index)
    if path.exists():
        raise StoreError(f"{path} already exists; sealed days are immutable")
    tmp = path.with_suffix(".csv.tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_day_header(n_cells))
        n = record.n_steps
        for k in range(n + 1):
            row = [k] + [repr(float(v)) for v in record.states[k]]
            if k < n:
                row += [repr(float(v)) for v in record.inputs[k]]
                row += [repr(float(record.service_flows[k])),
                        repr(float(record.station_inflows[k])),
                        repr(float(record.demand[k])),
                        repr(float(record.metering[k]))]
            else:
                row += [""] * (n_cells + 1 + 5)
            writer.writerow(row)
    os.replace(tmp, path)
    layout.day_count += 1
    layout._write_manifest()


def load_day(layout: ExperimentLayout, day: int) -> IterationRecord:
    if not 0 <= day < layout.day_count:
        raise StoreError(f"day {day} not stored (have {layout.day_count})")
    path = layout.day_path(day)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    n_cells = sum(1 for h in header if h.startswith("density_"))
    n = len(rows) - 1
    ns = n_cells + 2
    states = np.zeros((n + 1, ns))
    inputs = np.zeros((n, ns))
    service = np.zeros(n)
    inflows = np.zeros(n)
    demand = np.zeros(n)
    metering = np.zeros(n)
    for row in rows:
        k = int(row[0])
        states[k] = [float(v) for v in row[1:1 + ns]]
        if k < n:
            tail = row[1 + ns:]
            inputs[k] = [float(v) for v in tail[:ns]]
            service[k], inflows[k], demand[k], metering[k] = (
                float(tail[ns]), float(tail[ns + 1]),
                float(tail[ns + 2]), float(tail[ns + 3]))
    return IterationRecord(day_index=day, states=states, inputs=inputs,
                           service_flows=service, station_inflows=inflows,
                           demand=demand, metering=metering)


def load_window(layout: ExperimentLayout, day: int, k0: int,
                horizon: int) -> WindowSlice:
    """Exact slice of a stored day over [k0, k0+horizon], tail rule applied."""
    from .configfile import highway_from_dict

    record = load_day(layout, day)
    cfg: HighwayConfig = highway_from_dict(layout.highway)
    return slice_record_window(record, cfg, k0, horizon)
