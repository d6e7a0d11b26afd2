"""Finite-horizon affine prediction model and relaxed constraint assembly.

Stacks the linear CTM-s dynamics over a horizon of K steps into
``x = offset + M u + G_h h`` where

* ``x`` collects the states ``[rho_0..rho_{N-1}, l, e]`` at steps
  k0 .. k0+K (K+1 blocks),
* ``u`` collects the inputs ``[phi_0..phi_N, r]`` at steps k0 .. k0+K-1
  (K blocks),
* ``h`` is the exogenous service-to-queue flow over the window.

The in-horizon station inflow is eliminated through its geometric
recursion ``s(k) = beta*(phi_{l+1}(k-1) + s(k-1))``; its input
coefficients are folded into ``M`` and the propagation of the initial
inflow into ``offset``.

The min-based merge flows are relaxed into per-step linear inequalities
``A_x x + A_u u <= b`` grouped into named families so the right-hand side
can be re-assembled from other data (previous-day measurements for the
learning controller).

Note: ``M`` has a one-dimensional kernel. A uniform increment of all
interface flows in the final input block (with the ramp flow unchanged)
leaves every in-horizon state untouched, because its only effect would be
on the station inflow one step past the horizon. Every other input
direction is observable in the states, so ``rank(M) = n_u - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .plant import DemandProfile, HighwayConfig, PlantState

__all__ = [
    "Estimates",
    "CostWeights",
    "HorizonWindow",
    "LiftedQP",
    "ROW_FAMILIES",
    "build_lifted",
    "ground_truth_lifted",
    "dump_sparse_triplets",
]

# Constraint family tags, one per relaxed inequality group.
ROW_FAMILIES = (
    "demand_upstream",    # phi_0(k) <= estimated upstream demand
    "demand_cell",        # phi_i(k) <= demand of cell i-1 (density part)
    "cap_upstream_cell",  # phi_i(k) <= capacity of cell i-1
    "supply_cell",        # phi_i(k) <= supply of cell i (density part)
    "cap_cell",           # phi_i(k) <= capacity of cell i
    "demand_cell_merge",  # phi_j(k) <= demand of cell j-1 (density part)
    "cap_upstream_merge", # phi_j(k) <= capacity of cell j-1
    "ramp_demand",        # r(k) - e(k)/T <= service-to-queue flow
    "ramp_cap",           # r(k) <= ramp capacity
    "supply_merge_sum",   # phi_j(k) + r(k) <= supply of cell j (density part)
    "cap_merge_sum",      # phi_j(k) + r(k) <= capacity of cell j
    "queue_limit",        # e(k) <= queue capacity
)
_FAMILY_INDEX = {name: idx for idx, name in enumerate(ROW_FAMILIES)}


class UnsupportedConfiguration(ValueError):
    """Configuration outside the supported envelope (e.g. delay < horizon)."""


@dataclass(frozen=True)
class Estimates:
    """Parameter estimates used by the controller-side model."""

    beta_es: float
    delta_es_steps: int
    demand_es: DemandProfile

    def __post_init__(self):
        if not 0 < self.beta_es < 1:
            raise ValueError("beta_es must lie in (0, 1)")
        if self.delta_es_steps < 1:
            raise ValueError("delta_es_steps must be a positive integer")


@dataclass(frozen=True)
class CostWeights:
    """Weights of the quadratic-plus-linear planning objective."""

    w_rho: float = 1.0
    w_l: float = 0.05
    w_e: float = 0.1
    w_r: float = 0.1
    upstream_length_weight: float = 0.5  # length weight paired with phi_0
    flow_reward: float = 0.5             # scale of the travel-distance bonus
    quad_scale: float = 1.0

    def __post_init__(self):
        for name in ("w_rho", "w_l", "w_e", "w_r", "flow_reward", "quad_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.upstream_length_weight <= 0:
            raise ValueError("upstream_length_weight must be positive")


@dataclass
class HorizonWindow:
    """Measured data anchoring one planning window at absolute step k0."""

    start_step: int
    length: int
    state: PlantState
    history_slice: np.ndarray        # service-to-queue flow, K entries
    prev_exit_cell_outflow: float    # total exit-cell outflow of step k0-1

    def __post_init__(self):
        self.history_slice = np.asarray(self.history_slice, dtype=float)
        if self.length < 1:
            raise ValueError("window length must be positive")
        if self.history_slice.shape != (self.length,):
            raise ValueError("history slice must have one entry per step")
        if np.any(self.history_slice < 0):
            raise ValueError("history slice entries must be nonnegative")
        if self.prev_exit_cell_outflow < 0:
            raise ValueError("previous exit-cell outflow must be nonnegative")


@dataclass
class LiftedQP:
    """One assembled finite-horizon planning problem.

    ``quad_weight`` stores the diagonal of Q. Row metadata (family, step
    offset, interface index) lets callers re-derive the right-hand side
    from other data and audit which inequality each row encodes.
    """

    state_map: np.ndarray        # M, (n_x, n_u)
    history_map: np.ndarray      # G_h, (n_x, K)
    offset: np.ndarray           # (n_x,)
    ineq_state: sp.csr_matrix    # A_x, (n_rows, n_x)
    ineq_input: sp.csr_matrix    # A_u, (n_rows, n_u)
    ineq_rhs: np.ndarray         # b, (n_rows,)
    quad_weight: np.ndarray      # diag(Q), (n_x,)
    lin_state_cost: np.ndarray   # c_x, (n_x,)
    lin_input_cost: np.ndarray   # c_u, (n_u,)
    quad_scale: float
    horizon: int
    n_cells: int
    row_family: np.ndarray       # family index per row
    row_step: np.ndarray         # step offset within the window per row
    row_interface: np.ndarray    # interface index per row (-1 if n/a)
    inflow_propagation: np.ndarray = field(default=None)  # (n_x,)

    @property
    def n_x(self) -> int:
        return self.state_map.shape[0]

    @property
    def n_u(self) -> int:
        return self.state_map.shape[1]

    @property
    def block_size(self) -> int:
        return self.n_cells + 2

    def rows_of(self, family: str) -> np.ndarray:
        return np.flatnonzero(self.row_family == _FAMILY_INDEX[family])

    def rhs_for_data(self, demand_window: np.ndarray,
                     history_window: np.ndarray) -> np.ndarray:
        """Right-hand side with the data-dependent rows replaced.

        Only the upstream-demand and ramp-demand rows carry exogenous
        data; all other rows are configuration constants.
        """
        demand_window = np.asarray(demand_window, dtype=float)
        history_window = np.asarray(history_window, dtype=float)
        if demand_window.shape != (self.horizon,):
            raise ValueError("demand window must have one entry per step")
        if history_window.shape != (self.horizon,):
            raise ValueError("history window must have one entry per step")
        b = self.ineq_rhs.copy()
        rows = self.rows_of("demand_upstream")
        b[rows] = demand_window[self.row_step[rows]]
        rows = self.rows_of("ramp_demand")
        b[rows] = history_window[self.row_step[rows]]
        return b

    history_window: np.ndarray = field(default=None)  # as seen by the builder

    def predict(self, u: np.ndarray) -> np.ndarray:
        """State stack produced by the affine model for the input stack u."""
        return (self.offset + self.state_map @ u
                + self.history_map @ self.history_window)

    def offset_for(self, state_vec: np.ndarray,
                   station_inflow: float) -> np.ndarray:
        """Offset stack for a different anchor state and initial inflow.

        ``state_vec`` is the (N+2) measured state, ``station_inflow`` the
        station inflow of the anchor step.
        """
        return (np.tile(np.asarray(state_vec, dtype=float), self.horizon + 1)
                + station_inflow * self.inflow_propagation)


def build_lifted(cfg: HighwayConfig, est: Estimates, window: HorizonWindow,
                 weights: CostWeights = CostWeights()) -> LiftedQP:
    """Assemble the affine model, relaxed constraints and cost terms.

    The estimated service delay must cover the horizon so that every
    service-to-queue flow inside the window is historical data.
    """
    n = cfg.n_cells
    st = cfg.station
    K = window.length
    if est.delta_es_steps < K:
        raise UnsupportedConfiguration(
            f"estimated service delay ({est.delta_es_steps} steps) shorter "
            f"than the horizon ({K} steps): in-horizon service departures "
            "are not supported")
    if window.state.densities.shape != (n,):
        raise ValueError("window state does not match the configuration")

    T = cfg.sample_time_h
    lengths = cfg.lengths
    ell, j = st.exit_cell, st.merge_cell
    beta = est.beta_es
    ns = n + 2
    n_u = ns * K
    n_x = ns * (K + 1)

    x0 = np.concatenate([window.state.densities,
                         [window.state.in_station, window.state.exit_queue]])
    s0 = beta * window.prev_exit_cell_outflow

    M = np.zeros((n_x, n_u))
    Gh = np.zeros((n_x, K))
    prop = np.zeros(n_x)  # coefficient of s(k0) in each state entry

    # Running coefficients of the current state block and of s(k0+t).
    C = np.zeros((ns, n_u))
    H = np.zeros((ns, K))
    pr = np.zeros(ns)
    s_u = np.zeros(n_u)   # s(k0+t) = s_u . u + s_c * s(k0)
    s_c = 1.0

    for t in range(K):
        base = ns * t
        Cn, Hn, prn = C.copy(), H.copy(), pr.copy()
        for i in range(n):
            g = T / lengths[i]
            Cn[i, base + i] += g           # inflow phi_i
            Cn[i, base + i + 1] -= g       # outflow phi_{i+1}
            if i == j:
                Cn[i, base + ns - 1] += g  # ramp merge-back
        # station inflow s(t) leaves the exit cell and enters storage
        g = T / lengths[ell]
        Cn[ell] -= g * s_u
        prn[ell] -= g * s_c
        Cn[n] += T * s_u
        prn[n] += T * s_c
        Hn[n, t] -= T                      # service departure drains storage
        Hn[n + 1, t] += T                  # and feeds the exit queue
        Cn[n + 1, base + ns - 1] -= T      # ramp flow drains the queue

        C, H, pr = Cn, Hn, prn
        blk = slice(ns * (t + 1), ns * (t + 2))
        M[blk] = C
        Gh[blk] = H
        prop[blk] = pr

        # advance the inflow recursion: s(t+1) = beta*(phi_{l+1}(t) + s(t))
        s_u = beta * s_u
        s_u[base + ell + 1] += beta
        s_c = beta * s_c

    offset = np.tile(x0, K + 1) + s0 * prop

    # ---- relaxed inequalities -------------------------------------------
    rows_x: list[tuple[int, int, float]] = []   # (row, col, val) into x
    rows_u: list[tuple[int, int, float]] = []
    b_vals: list[float] = []
    fam: list[int] = []
    stp: list[int] = []
    itf: list[int] = []
    row = 0

    def emit(family: str, t: int, i: int, rhs: float,
             x_terms=(), u_terms=()):
        nonlocal row
        for col, val in x_terms:
            rows_x.append((row, col, val))
        for col, val in u_terms:
            rows_u.append((row, col, val))
        b_vals.append(rhs)
        fam.append(_FAMILY_INDEX[family])
        stp.append(t)
        itf.append(i)
        row += 1

    def xcol(t: int, comp: int) -> int:
        return ns * t + comp

    def ucol(t: int, comp: int) -> int:
        return ns * t + comp

    demand_window = np.array([est.demand_es.at(window.start_step + t)
                              for t in range(K)])

    for t in range(K):
        for i in range(n + 1):
            phi_col = ucol(t, i)
            if i == j:
                cell_up = cfg.cells[j - 1]
                b_up = beta if (j - 1) == ell else 0.0
                emit("demand_cell_merge", t, i, 0.0,
                     x_terms=[(xcol(t, j - 1),
                               -(1.0 - b_up) * cell_up.free_flow_speed)],
                     u_terms=[(phi_col, 1.0)])
                emit("cap_upstream_merge", t, i, cell_up.capacity,
                     u_terms=[(phi_col, 1.0)])
                emit("ramp_demand", t, i, float(window.history_slice[t]),
                     x_terms=[(xcol(t, n + 1), -1.0 / T)],
                     u_terms=[(ucol(t, ns - 1), 1.0)])
                emit("ramp_cap", t, i, st.ramp_capacity,
                     u_terms=[(ucol(t, ns - 1), 1.0)])
                cell_j = cfg.cells[j]
                emit("supply_merge_sum", t, i,
                     cell_j.congestion_wave_speed * cell_j.jam_density,
                     x_terms=[(xcol(t, j), cell_j.congestion_wave_speed)],
                     u_terms=[(phi_col, 1.0), (ucol(t, ns - 1), 1.0)])
                emit("cap_merge_sum", t, i, cell_j.capacity,
                     u_terms=[(phi_col, 1.0), (ucol(t, ns - 1), 1.0)])
                continue
            if i == 0:
                emit("demand_upstream", t, i, float(demand_window[t]),
                     u_terms=[(phi_col, 1.0)])
            else:
                cell_up = cfg.cells[i - 1]
                b_up = beta if (i - 1) == ell else 0.0
                emit("demand_cell", t, i, 0.0,
                     x_terms=[(xcol(t, i - 1),
                               -(1.0 - b_up) * cell_up.free_flow_speed)],
                     u_terms=[(phi_col, 1.0)])
                emit("cap_upstream_cell", t, i, cell_up.capacity,
                     u_terms=[(phi_col, 1.0)])
            if i < n:
                cell = cfg.cells[i]
                emit("supply_cell", t, i,
                     cell.congestion_wave_speed * cell.jam_density,
                     x_terms=[(xcol(t, i), cell.congestion_wave_speed)],
                     u_terms=[(phi_col, 1.0)])
                emit("cap_cell", t, i, cell.capacity,
                     u_terms=[(phi_col, 1.0)])
    for t in range(1, K + 1):
        emit("queue_limit", t, -1, st.queue_capacity,
             x_terms=[(xcol(t, n + 1), 1.0)])

    def to_csr(triplets, ncols):
        if triplets:
            r, c, v = zip(*triplets)
        else:
            r, c, v = (), (), ()
        return sp.csr_matrix((v, (r, c)), shape=(row, ncols))

    # ---- cost ------------------------------------------------------------
    st_block_q = np.concatenate([
        weights.w_rho * lengths / np.array([c.jam_density for c in cfg.cells]),
        [weights.w_l / st.station_capacity, weights.w_e / st.queue_capacity],
    ])
    q_diag = np.tile(st_block_q, K + 1)
    cx_block = np.concatenate([lengths, [0.0, 0.0]])
    c_x = np.tile(cx_block, K + 1)
    cu_block = weights.flow_reward * np.concatenate([
        [weights.upstream_length_weight], lengths, [weights.w_r]])
    c_u = np.tile(cu_block, K)

    return LiftedQP(
        state_map=M,
        history_map=Gh,
        offset=offset,
        ineq_state=to_csr(rows_x, n_x),
        ineq_input=to_csr(rows_u, n_u),
        ineq_rhs=np.array(b_vals),
        quad_weight=q_diag,
        lin_state_cost=c_x,
        lin_input_cost=c_u,
        quad_scale=weights.quad_scale,
        horizon=K,
        n_cells=n,
        row_family=np.array(fam),
        row_step=np.array(stp),
        row_interface=np.array(itf),
        inflow_propagation=prop,
        history_window=window.history_slice.copy(),
    )


def ground_truth_lifted(cfg: HighwayConfig, window: HorizonWindow,
                        demand: DemandProfile,
                        weights: CostWeights = CostWeights()) -> LiftedQP:
    """Lifted problem built with the exact plant parameters."""
    est = Estimates(beta_es=cfg.station.split_ratio,
                    delta_es_steps=cfg.station.service_delay_steps,
                    demand_es=demand)
    return build_lifted(cfg, est, window, weights)


def dump_sparse_triplets(qp: LiftedQP, path) -> None:
    """Write the assembled matrices as coordinate triplets for inspection.

    Format: one section per matrix, ``# name rows cols`` followed by
    ``row col value`` lines.
    """
    with open(path, "w") as fh:
        for name, mat in (("state_map", sp.coo_matrix(qp.state_map)),
                          ("history_map", sp.coo_matrix(qp.history_map)),
                          ("ineq_state", qp.ineq_state.tocoo()),
                          ("ineq_input", qp.ineq_input.tocoo())):
            fh.write(f"# {name} {mat.shape[0]} {mat.shape[1]}\n")
            for r, c, v in zip(mat.row, mat.col, mat.data):
                fh.write(f"{r} {c} {v!r}\n")
        fh.write(f"# offset {qp.n_x} 1\n")
        for r, v in enumerate(qp.offset):
            if v != 0.0:
                fh.write(f"{r} 0 {v!r}\n")
        fh.write(f"# ineq_rhs {len(qp.ineq_rhs)} 1\n")
        for r, v in enumerate(qp.ineq_rhs):
            fh.write(f"{r} 0 {v!r}\n")
