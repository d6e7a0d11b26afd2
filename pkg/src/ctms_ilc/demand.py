"""Upstream demand profiles: CSV ingestion and a synthetic peak generator."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .plant import DemandProfile

__all__ = [
    "PeakShape",
    "generate_peak_profile",
    "load_demand_csv",
    "save_demand_csv",
]

CSV_HEADER = ("step", "demand_veh_per_h")


@dataclass(frozen=True)
class PeakShape:
    """Parameters of the synthetic morning-peak generator.

    The curve starts at ``base_level``, rises over ``rise_steps`` to
    ``peak_level``, holds it for ``plateau_steps``, optionally dips to
    ``mid_level`` before a second plateau of the same length (at
    ``second_peak_level`` when given, else at ``peak_level``), then
    falls over ``fall_steps`` to ``end_level``. Transitions are
    raised-cosine, so the curve is smooth. ``noise_std`` adds seeded
    Gaussian noise, clipped at zero.
    """

    base_level: float = 850.0
    peak_level: float = 1800.0
    end_level: float = 850.0
    rise_steps: int = 180
    plateau_steps: int = 280
    fall_steps: int = 220
    mid_level: float | None = None
    mid_dip_steps: int = 60
    second_peak_level: float | None = None
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("base_level", "peak_level", "end_level"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.second_peak_level is not None:
            if self.second_peak_level < 0:
                raise ValueError("second_peak_level must be nonnegative")
            if self.mid_level is None:
                raise ValueError("second_peak_level requires mid_level")
        for name in ("rise_steps", "plateau_steps", "fall_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


def _raised_cosine(a: float, b: float, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n, endpoint=False)
    return a + (b - a) * 0.5 * (1.0 - np.cos(np.pi * t))


def generate_peak_profile(shape: PeakShape, steps: int) -> DemandProfile:
    """Deterministic synthetic peak demand with ``steps`` samples."""
    if steps < 1:
        raise ValueError("steps must be positive")
    pieces = [_raised_cosine(shape.base_level, shape.peak_level, shape.rise_steps)]
    pieces.append(np.full(shape.plateau_steps, shape.peak_level))
    top = shape.peak_level
    if shape.mid_level is not None:
        top = (shape.peak_level if shape.second_peak_level is None
               else shape.second_peak_level)
        pieces.append(_raised_cosine(shape.peak_level, shape.mid_level,
                                     shape.mid_dip_steps // 2))
        pieces.append(_raised_cosine(shape.mid_level, top,
                                     shape.mid_dip_steps - shape.mid_dip_steps // 2))
        pieces.append(np.full(shape.plateau_steps, top))
    pieces.append(_raised_cosine(top, shape.end_level, shape.fall_steps))
    curve = np.concatenate(pieces)
    if len(curve) >= steps:
        curve = curve[:steps]
    else:
        curve = np.concatenate([curve,
                                np.full(steps - len(curve), shape.end_level)])
    if shape.noise_std > 0:
        rng = np.random.default_rng(shape.seed)
        curve = curve + rng.normal(0.0, shape.noise_std, size=steps)
    return DemandProfile(np.maximum(curve, 0.0))


def load_demand_csv(path: str | Path) -> DemandProfile:
    """Read a two-column ``step,demand_veh_per_h`` CSV with header."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValueError(
                f"demand CSV must start with header {','.join(CSV_HEADER)}")
        values = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected two columns")
            step_idx, value = int(row[0]), float(row[1])
            if step_idx != len(values):
                raise ValueError(f"{path}:{lineno}: steps must be contiguous "
                                 f"from 0 (got {step_idx})")
            values.append(value)
    if not values:
        raise ValueError(f"{path}: no demand rows")
    return DemandProfile(np.array(values))


def save_demand_csv(profile: DemandProfile, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for k, value in enumerate(profile.values):
            writer.writerow([k, repr(float(value))])
