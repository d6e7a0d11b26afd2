"""Congestion and queue metrics for evaluating a simulated run.

Total travel time (TTT) integrates vehicle-kilometres of density over the
evaluation window, total waiting time (TWT) integrates the station exit
queue, and their sum is the total time spent (TTS). Sums run over the
closed sample range [t_s, t_e] and are multiplied by the sampling time in
hours, so all three are expressed in veh*h.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .plant import HighwayConfig, Trajectory

__all__ = [
    "MetricsReport",
    "ttt",
    "twt",
    "tts",
    "delta_emax",
    "evaluate",
    "compare",
]


@dataclass(frozen=True)
class MetricsReport:
    ttt: float
    twt: float
    tts: float
    delta_emax: float
    delta_ttt: Optional[float] = None
    delta_twt: Optional[float] = None
    delta_tts: Optional[float] = None

    def to_json(self) -> str:
        payload = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def _check_window(traj: Trajectory, t_s: int, t_e: int) -> None:
    if not 0 <= t_s <= t_e < len(traj.states):
        raise IndexError(f"window [{t_s}, {t_e}] outside trajectory "
                         f"of {len(traj.states)} states")


def ttt(traj: Trajectory, t_s: int, t_e: int, cfg: HighwayConfig) -> float:
    """Total travel time on the stretch over [t_s, t_e] [veh*h]."""
    _check_window(traj, t_s, t_e)
    rho = traj.density_matrix()[t_s:t_e + 1]
    return float(cfg.sample_time_h * np.sum(rho @ cfg.lengths))


def twt(traj: Trajectory, t_s: int, t_e: int, cfg: HighwayConfig) -> float:
    """Total waiting time in the station exit queue over [t_s, t_e] [veh*h]."""
    _check_window(traj, t_s, t_e)
    return float(cfg.sample_time_h * np.sum(traj.exit_queues()[t_s:t_e + 1]))


def tts(traj: Trajectory, t_s: int, t_e: int, cfg: HighwayConfig) -> float:
    """Total time spent: travel plus queue waiting [veh*h]."""
    return ttt(traj, t_s, t_e, cfg) + twt(traj, t_s, t_e, cfg)


def delta_emax(traj: Trajectory, t_s: int, t_e: int,
               cfg: HighwayConfig) -> float:
    """Maximum relative violation of the queue capacity over [t_s, t_e]."""
    _check_window(traj, t_s, t_e)
    e = traj.exit_queues()[t_s:t_e + 1]
    cap = cfg.station.queue_capacity
    return float(np.max(np.maximum(e - cap, 0.0)) / cap)


def evaluate(traj: Trajectory, t_s: int, t_e: int,
             cfg: HighwayConfig) -> MetricsReport:
    t = ttt(traj, t_s, t_e, cfg)
    w = twt(traj, t_s, t_e, cfg)
    return MetricsReport(ttt=t, twt=w, tts=t + w,
                         delta_emax=delta_emax(traj, t_s, t_e, cfg))


def compare(report: MetricsReport, baseline: MetricsReport) -> MetricsReport:
    """Report with relative indices (report minus baseline) filled in."""
    return MetricsReport(
        ttt=report.ttt,
        twt=report.twt,
        tts=report.tts,
        delta_emax=report.delta_emax,
        delta_ttt=report.ttt - baseline.ttt,
        delta_twt=report.twt - baseline.twt,
        delta_tts=report.tts - baseline.tts,
    )
