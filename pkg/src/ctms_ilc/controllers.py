"""Receding-horizon ramp-metering controllers.

Two planners share the same lifted model machinery:

* the nominal MPC, run with either estimated or exact parameters, which
  minimizes predicted travel time minus a travel-distance reward; and
* the iterative learning update, which stays close (in the M'QM metric)
  to the previous day's measured inputs while following an approximate
  gradient of the nominal objective, with the model-offset error of the
  previous day subtracted out of the prediction.

Both are solved in the input space only: the state stack is eliminated
through the affine model, so one day of control reuses a single matrix
factorization across all planning windows (and, for the learning
controller, across days).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .lifted import (ROW_FAMILIES, CostWeights, Estimates, HorizonWindow,
                     LiftedQP, build_lifted)
from .plant import (DemandProfile, HighwayConfig, PlantState, StepOutput,
                    Trajectory, simulate, step)
from .qp import BoxADMM, SolverSettings

__all__ = [
    "ControllerConfig",
    "IterationRecord",
    "WindowSlice",
    "PlannerLogEntry",
    "SolverFailure",
    "RecedingHorizonPlanner",
    "mpc_plan",
    "ilc_plan",
    "gradient_estimate",
    "run_day",
    "slice_record_window",
    "tightness_report",
    "write_planner_log",
    "CONTROLLER_KINDS",
]

CONTROLLER_KINDS = ("uncontrolled", "mpc_est", "mpc_gt", "ilc")

# Planning solves tolerate a looser accuracy than the solver default:
# flow-scale residuals of 1e-5 relative are far below physical relevance.
# Infeasibility detection stays off: every planning program is feasible
# by construction (zero flow always satisfies the relaxed constraints).
PLANNER_SETTINGS = SolverSettings(eps_abs=1e-4, eps_rel=1e-4,
                                  max_iter=20000, adapt_interval=50,
                                  eps_infeas=0.0, stall_window=3000)


class SolverFailure(RuntimeError):
    """A planning solve ended without a usable iterate."""


@dataclass(frozen=True)
class ControllerConfig:
    """Horizon, update cadence and cost weights of both controllers."""

    horizon: int = 90
    update_period: int = 30
    flow_reward: float = 0.5           # trade-off of the travel-distance term
    quad_scale: float = 100.0          # scale of the quadratic state term
    ilc_step: float = 0.01             # step along the approximate gradient;
                                       # 1/quad_scale makes the learning update
                                       # a full step in the nominal-cost metric
    w_rho: float = 1.0
    w_l: float = 0.05
    w_e: float = 0.1
    w_r: float = 0.1
    upstream_length_weight: float = 0.5
    soft_queue_penalty: float = 1e4    # fallback weight on queue overshoot
    block_steps: int = 3               # move-blocking width of both planners
    ilc_queue_margin: float = 0.1      # share of the queue capacity reserved
                                       # in learning plans: the learned model
                                       # is only first-order correct, so the
                                       # plant queue overshoots plans that sit
                                       # exactly at the limit
    ilc_step_decay: float = 0.25       # per-day geometric decay of the
                                       # learning step: the first learning day
                                       # takes the full step, later days mostly
                                       # anchor to the previous day so the
                                       # deadbeat update cannot limit-cycle
    ilc_prox_reg: float = 0.1          # ridge on the learning proximity
                                       # metric, as a fraction of its mean
                                       # diagonal: the prediction-weighted
                                       # metric is rank-deficient, and along
                                       # its null directions an unregularized
                                       # update drifts to the constraint
                                       # boundary at any step size

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if not 0 < self.update_period <= self.horizon:
            raise ValueError("update period must lie in (0, horizon]")
        if self.block_steps < 1:
            raise ValueError("block_steps must be a positive integer")
        if (self.horizon % self.block_steps
                or self.update_period % self.block_steps):
            raise ValueError("block_steps must divide both the horizon "
                             "and the update period")
        for name in ("flow_reward", "quad_scale", "w_rho",
                     "w_l", "w_e", "w_r", "upstream_length_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.ilc_step < 0:
            raise ValueError("ilc_step must be nonnegative")
        if not 0 <= self.ilc_queue_margin < 1:
            raise ValueError("ilc_queue_margin must lie in [0, 1)")
        if not 0 <= self.ilc_step_decay <= 1:
            raise ValueError("ilc_step_decay must lie in [0, 1]")
        if self.ilc_prox_reg < 0:
            raise ValueError("ilc_prox_reg must be nonnegative")

    def validate_for(self, cfg: HighwayConfig) -> None:
        """The ramp reward must stay below the merge-feeder length weight,
        otherwise the cost no longer prioritizes the mainstream flow."""
        feeder_length = cfg.cells[cfg.station.merge_cell - 1].length_km
        if not self.w_r < feeder_length:
            raise ValueError(
                f"w_r={self.w_r} must be smaller than the length "
                f"({feeder_length}) of the cell feeding the merge")

    def weights(self) -> CostWeights:
        return CostWeights(
            w_rho=self.w_rho, w_l=self.w_l, w_e=self.w_e, w_r=self.w_r,
            upstream_length_weight=self.upstream_length_weight,
            flow_reward=self.flow_reward, quad_scale=self.quad_scale)


@dataclass
class IterationRecord:
    """One day's measurements: everything the next iteration needs."""

    day_index: int
    states: np.ndarray          # (steps+1, N+2): rho_0..rho_{N-1}, l, e
    inputs: np.ndarray          # (steps, N+2): phi_0..phi_N, r (realized)
    service_flows: np.ndarray   # (steps,)
    station_inflows: np.ndarray # (steps,)
    demand: np.ndarray          # (steps,) realized upstream demand
    metering: np.ndarray        # (steps,) applied command (ramp cap if idle)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        for name in ("service_flows", "station_inflows", "demand",
                     "metering"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.n_steps
        if self.states.shape[0] != n + 1:
            raise ValueError("states must have one more row than inputs")
        if self.states.shape[1] != self.inputs.shape[1]:
            raise ValueError("state and input rows must have equal width")
        for name in ("service_flows", "station_inflows", "demand",
                     "metering"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one entry per step")
        for name in ("states", "inputs", "service_flows", "station_inflows",
                     "demand", "metering"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"{name} must be finite and nonnegative")

    @property
    def n_steps(self) -> int:
        return self.inputs.shape[0]


@dataclass
class WindowSlice:
    """One window of a previous iteration's measurements."""

    start_step: int
    length: int
    states: np.ndarray          # (K+1, N+2)
    inputs: np.ndarray          # (K, N+2)
    service_flows: np.ndarray   # (K,)
    station_inflows: np.ndarray # (K,)
    demand: np.ndarray          # (K,)
    prev_exit_cell_outflow: float
    tail_padded: bool = False

    def state_stack(self) -> np.ndarray:
        return self.states.reshape(-1)

    def input_stack(self) -> np.ndarray:
        return self.inputs.reshape(-1)


@dataclass
class PlannerLogEntry:
    day_index: int
    window_start: int
    mode: str
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    max_violation: float
    applied_metering: float
    soft_fallback: bool


def write_planner_log(entries: list[PlannerLogEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        names = list(asdict(entries[0]).keys()) if entries else [
            f.name for f in PlannerLogEntry.__dataclass_fields__.values()]
        writer.writerow(names)
        for e in entries:
            writer.writerow(list(asdict(e).values()))


# ---------------------------------------------------------------------------
# reduced-space workspace


class _ReducedWorkspace:
    """QP in the input space for a fixed lifted structure.

    Rows acting on a single input with no state coupling become variable
    bounds; the rest are condensed through the state map. The ADMM
    factorization is built once and reused for every window (only the
    linear cost and the bounds change).

    With ``block_steps > 1`` the inputs are held piecewise constant over
    blocks of that many steps (move blocking), shrinking the variable
    count accordingly; all constraint rows are kept, so the blocked
    solution is feasible for the original program. The public interface
    stays in the full input space.
    """

    def __init__(self, lifted: LiftedQP, P: np.ndarray,
                 settings: SolverSettings, soft_queue_penalty: float,
                 block_steps: int = 1):
        ns = lifted.block_size
        n_u = lifted.n_u
        K = lifted.horizon
        if K % block_steps != 0:
            raise ValueError("block_steps must divide the horizon")
        self.lifted = lifted
        self.settings = settings
        self.soft_queue_penalty = soft_queue_penalty
        self.block_steps = block_steps
        K_b = K // block_steps
        self.n_bu = ns * K_b
        A_x, A_u = lifted.ineq_state, lifted.ineq_input

        x_nnz = np.diff(A_x.indptr)
        u_nnz = np.diff(A_u.indptr)
        bound = (x_nnz == 0) & (u_nnz == 1)
        # a bound row must have unit coefficient; all assembled rows do
        self.bound_rows = np.flatnonzero(bound)
        self.gen_rows = np.flatnonzero(~bound)
        self.bound_vars = A_u[self.bound_rows].indices
        assert np.allclose(A_u[self.bound_rows].data, 1.0)
        # full input index t*ns+c -> blocked index (t//b)*ns+c
        steps_of = np.arange(n_u) // ns
        self._block_of = (steps_of // block_steps) * ns + np.arange(n_u) % ns
        B = sp.csr_matrix(
            (np.ones(n_u), (np.arange(n_u), self._block_of)),
            shape=(n_u, self.n_bu))

        self.A_xg = A_x[self.gen_rows].tocsr()
        self.A_ug = (A_u[self.gen_rows] @ B).tocsr()
        M_b = lifted.state_map @ B
        A_gen = self.A_xg @ M_b + self.A_ug.toarray()
        A_setup = np.vstack([A_gen, -M_b[ns:], np.eye(self.n_bu)])
        self.n_gen = A_gen.shape[0]
        self.n_pos = M_b.shape[0] - ns
        self.P = np.asarray(B.T @ (P @ B))
        lo = np.concatenate([
            np.full(self.n_gen + self.n_pos, -np.inf), np.zeros(self.n_bu)])
        hi = np.full(A_setup.shape[0], np.inf)
        # the stacked matrix factors through the state map; products via
        # the (much smaller) state map dominate the per-iteration cost
        A_xg, A_ug = self.A_xg, self.A_ug
        n_gen, n_pos = self.n_gen, self.n_pos

        def _mv(v):
            Mv = M_b @ v
            return np.concatenate([A_xg @ Mv + A_ug @ v, -Mv[ns:], v])

        def _rmv(w):
            wg = w[:n_gen]
            t = A_xg.T @ wg
            t[ns:] -= w[n_gen:n_gen + n_pos]
            return M_b.T @ t + A_ug.T @ wg + w[n_gen + n_pos:]

        self.work = BoxADMM(self.P, np.zeros(self.n_bu), A_setup, lo, hi,
                            settings, matvec=_mv, rmatvec=_rmv)
        self._B = B
        self._M_b = M_b
        self._A_setup = A_setup
        self.lo = lo
        self._soft_work = None
        self._queue_rows_local = np.flatnonzero(np.isin(
            self.gen_rows, lifted.rows_of("queue_limit")))
        # per-section (step, group, step unit) labels for shifting warm
        # starts; a group is one constraint stream over time (family x
        # interface, or one state/input component)
        gen_groups = (lifted.row_family[self.gen_rows] * (ns + 2)
                      + lifted.row_interface[self.gen_rows] + 1)
        self._sections = (
            (lifted.row_step[self.gen_rows], gen_groups, 1),
            (np.repeat(np.arange(K), ns), np.tile(np.arange(ns), K), 1),
            (np.repeat(np.arange(K_b), ns), np.tile(np.arange(ns), K_b),
             block_steps),
        )
        self._shift_cache: dict[int, np.ndarray] = {}

    # -- full/blocked input conversions -------------------------------------
    def compress(self, u: np.ndarray) -> np.ndarray:
        b, ns = self.block_steps, self.lifted.block_size
        if b == 1:
            return u
        return u.reshape(-1, b, ns).mean(axis=1).reshape(-1)

    def expand(self, ub: np.ndarray) -> np.ndarray:
        b, ns = self.block_steps, self.lifted.block_size
        if b == 1:
            return ub
        return np.repeat(ub.reshape(-1, ns), b, axis=0).reshape(-1)

    def bounds_from(self, b: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Upper bounds (hi) for the stacked rows, given the full-rank rhs
        ``b`` and the constant state stack ``w``."""
        ub = np.full(self.n_bu, np.inf)
        np.minimum.at(ub, self._block_of[self.bound_vars],
                      b[self.bound_rows])
        b_gen = b[self.gen_rows] - self.A_xg @ w
        ns = self.lifted.block_size
        return np.concatenate([b_gen, w[ns:], ub])

    def _shift_index(self, p: int) -> np.ndarray:
        """Row permutation mapping each dual to its source p steps later.

        Streams that end before step t+p repeat their final entry.
        """
        cached = self._shift_cache.get(p)
        if cached is not None:
            return cached
        idx = np.empty(len(self.lo), dtype=np.intp)
        off = 0
        for steps, groups, unit in self._sections:
            shift = p // unit
            gmax = np.zeros(int(groups.max()) + 1, dtype=steps.dtype)
            np.maximum.at(gmax, groups, steps)
            span = int(steps.max()) + 1
            key = groups * span + steps
            order = np.argsort(key)
            src_key = groups * span + np.minimum(steps + shift, gmax[groups])
            pos = np.searchsorted(key[order], src_key)
            idx[off:off + len(steps)] = off + order[pos]
            off += len(steps)
        self._shift_cache[p] = idx
        return idx

    def shift_warm(self, u: np.ndarray, y: np.ndarray, p: int):
        """Shift a previous solution p steps earlier in time."""
        K = self.lifted.horizon
        ns = self.lifted.block_size
        if p % self.block_steps != 0:
            raise ValueError("shift must be a multiple of the block size")
        u_mat = u.reshape(K, ns)
        u_shift = np.vstack([u_mat[p:], np.repeat(u_mat[-1:], p, axis=0)])
        return u_shift.reshape(-1), y[self._shift_index(p)]

    def solve(self, q: np.ndarray, hi: np.ndarray,
              warm_u: Optional[np.ndarray], warm_y: Optional[np.ndarray]):
        q_b = np.asarray(self._B.T @ q)
        self.work.update(q=q_b, hi=hi)
        x0 = None if warm_u is None else self.compress(warm_u)
        xb, y, status, it, rp, rd = self.work.solve(x0=x0, y0=warm_y)
        soft = False
        if status != "optimal" and rp > 1e-2:
            # the soft program only relaxes the queue rows, so retry with
            # it only when those are what the iterate is stuck on
            qr = self._queue_rows_local
            q_viol = float(np.max((self._A_setup @ xb)[qr] - hi[qr],
                                  initial=-np.inf))
            if status == "infeasible_detected" or q_viol > 1e-2:
                xb, y, status, it, rp, rd = self._solve_soft(q_b, hi, x0)
                soft = True
        viol = self._violation(xb, hi)
        return self.expand(xb), y, status, it, rp, rd, viol, soft

    def _violation(self, ub: np.ndarray, hi: np.ndarray) -> float:
        Au = self._A_setup @ ub
        return float(max(np.max(Au - hi, initial=0.0),
                         np.max(self.lo - Au, initial=0.0)))

    def _solve_soft(self, q_b, hi, warm_ub):
        """One-sided penalty on the queue-limit rows only."""
        queue_rows_local = self._queue_rows_local
        n_bu = self.n_bu
        n_s = len(queue_rows_local)
        if self._soft_work is None:
            slack_cols = np.zeros((self._A_setup.shape[0], n_s))
            slack_cols[queue_rows_local, np.arange(n_s)] = -1.0
            A_soft = np.block([
                [self._A_setup, slack_cols],
                [np.zeros((n_s, n_bu)), np.eye(n_s)],
            ])
            P_soft = np.zeros((n_bu + n_s, n_bu + n_s))
            P_soft[:n_bu, :n_bu] = self.P
            lo = np.concatenate([self.lo, np.zeros(n_s)])
            hi0 = np.concatenate([hi, np.full(n_s, np.inf)])
            base_mv, base_rmv = self.work._mv, self.work._rmv
            m_base = self._A_setup.shape[0]

            def _soft_mv(v):
                out = base_mv(v[:n_bu])
                out[queue_rows_local] -= v[n_bu:]
                return np.concatenate([out, v[n_bu:]])

            def _soft_rmv(w):
                top = base_rmv(w[:m_base])
                return np.concatenate(
                    [top, w[m_base:] - w[:m_base][queue_rows_local]])

            self._soft_work = BoxADMM(
                P_soft, np.zeros(n_bu + n_s), A_soft, lo, hi0, self.settings,
                matvec=_soft_mv, rmatvec=_soft_rmv)
        q_soft = np.concatenate([q_b, np.full(n_s, self.soft_queue_penalty)])
        hi_soft = np.concatenate([hi, np.full(n_s, np.inf)])
        self._soft_work.update(q=q_soft, hi=hi_soft)
        warm = None if warm_ub is None else np.concatenate(
            [warm_ub, np.zeros(n_s)])
        x, y, status, it, rp, rd = self._soft_work.solve(x0=warm)
        return x[:n_bu], y[:self._A_setup.shape[0]], status, it, rp, rd


# ---------------------------------------------------------------------------
# planners


class RecedingHorizonPlanner:
    """Persistent planning state for one scenario.

    Builds the lifted structure once per parameter set, owns the reduced
    workspaces (nominal and learning), caches warm starts per window
    start across days and accumulates a per-solve log.
    """

    def __init__(self, cfg: HighwayConfig, ctrl: ControllerConfig,
                 estimates: Estimates,
                 settings: SolverSettings = PLANNER_SETTINGS,
                 state_reference: Optional[np.ndarray] = None):
        ctrl.validate_for(cfg)
        self.cfg = cfg
        self.ctrl = ctrl
        self.estimates = estimates
        self.settings = settings
        dummy = HorizonWindow(
            start_step=0, length=ctrl.horizon,
            state=PlantState.empty(cfg),
            history_slice=np.zeros(ctrl.horizon),
            prev_exit_cell_outflow=0.0)
        self.template = build_lifted(cfg, estimates, dummy, ctrl.weights())
        self.x_ref = (np.zeros(self.template.n_x) if state_reference is None
                      else np.asarray(state_reference, dtype=float))
        self._QM = self.template.quad_weight[:, None] * self.template.state_map
        self._W = self.template.state_map.T @ self._QM
        self._W_prox = self._W
        if ctrl.ilc_prox_reg > 0.0:
            ridge = ctrl.ilc_prox_reg * float(np.mean(np.diag(self._W)))
            self._W_prox = self._W + ridge * np.eye(self._W.shape[0])
        self._Mt_cx = self.template.state_map.T @ self.template.lin_state_cost
        self._mpc_work: Optional[_ReducedWorkspace] = None
        self._ilc_work: Optional[_ReducedWorkspace] = None
        self._warm: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = {}
        self._last: Optional[tuple[str, np.ndarray, np.ndarray]] = None
        self.log: list[PlannerLogEntry] = []

    # -- workspaces ---------------------------------------------------------
    def _mpc(self) -> _ReducedWorkspace:
        if self._mpc_work is None:
            P = self.template.quad_scale * self._W
            self._mpc_work = _ReducedWorkspace(
                self.template, P, self.settings, self.ctrl.soft_queue_penalty,
                block_steps=self.ctrl.block_steps)
        return self._mpc_work

    def _ilc(self) -> _ReducedWorkspace:
        if self._ilc_work is None:
            self._ilc_work = _ReducedWorkspace(
                self.template, self._W_prox, self.settings,
                self.ctrl.soft_queue_penalty,
                block_steps=self.ctrl.block_steps)
        return self._ilc_work

    # -- data helpers -------------------------------------------------------
    def demand_window(self, k0: int) -> np.ndarray:
        return np.array([self.estimates.demand_es.at(k0 + t)
                         for t in range(self.ctrl.horizon)])

    def history_window(self, k0: int, inflows_so_far: np.ndarray
                       ) -> np.ndarray:
        """Service-to-queue flows over the window, inferred from measured
        station inflows delayed by the estimated service time."""
        delta = self.estimates.delta_es_steps
        out = np.zeros(self.ctrl.horizon)
        for t in range(self.ctrl.horizon):
            src = k0 + t - delta
            if 0 <= src < len(inflows_so_far):
                out[t] = inflows_so_far[src]
        return out

    def _warm_for(self, mode: str, k0: int, work: _ReducedWorkspace):
        if (mode, k0) in self._warm:
            return self._warm[(mode, k0)]
        if self._last is not None and self._last[0] == mode:
            _, u_prev, y_prev = self._last
            return work.shift_warm(u_prev, y_prev, self.ctrl.update_period)
        return None, None

    def _record(self, day: int, k0: int, mode: str, status, it, rp, rd,
                viol, soft, r_first: float):
        self.log.append(PlannerLogEntry(
            day_index=day, window_start=k0, mode=mode, status=status,
            iterations=it, primal_residual=float(rp), dual_residual=float(rd),
            max_violation=viol, applied_metering=r_first,
            soft_fallback=soft))
        if status not in ("optimal", "max_iterations", "stalled"):
            raise SolverFailure(
                f"planning solve at day {day}, step {k0} ended with "
                f"status {status}")

    # -- nominal MPC --------------------------------------------------------
    def plan_mpc(self, window: HorizonWindow, day_index: int = 0
                 ) -> np.ndarray:
        """Optimal input sequence (K, N+2) for the nominal program."""
        lifted = self.template
        work = self._mpc()
        K, ns = lifted.horizon, lifted.block_size
        x0 = np.concatenate([window.state.densities,
                             [window.state.in_station,
                              window.state.exit_queue]])
        s0 = self.estimates.beta_es * window.prev_exit_cell_outflow
        w = lifted.offset_for(x0, s0) + lifted.history_map @ window.history_slice
        b = lifted.rhs_for_data(self.demand_window(window.start_step),
                                window.history_slice)
        a = lifted.quad_scale
        q = (a * (self._QM.T @ (w - self.x_ref)) + self._Mt_cx
             - lifted.lin_input_cost)
        hi = work.bounds_from(b, w)
        warm_u, warm_y = self._warm_for("mpc", window.start_step, work)
        u, y, status, it, rp, rd, viol, soft = work.solve(
            q, hi, warm_u, warm_y)
        self._warm[("mpc", window.start_step)] = (u, y)
        self._last = ("mpc", u, y)
        u_mat = np.maximum(u.reshape(K, ns), 0.0)
        self._record(day_index, window.start_step, "mpc", status, it, rp, rd,
                     viol, soft, float(u_mat[0, -1]))
        return u_mat

    # -- learning update ----------------------------------------------------
    def plan_ilc(self, window: HorizonWindow, prev: WindowSlice,
                 day_index: int) -> np.ndarray:
        """Input sequence from the learning program anchored on the
        previous iteration's measurements over the same window."""
        lifted = self.template
        work = self._ilc()
        K, ns = lifted.horizon, lifted.block_size
        if prev.length != K or prev.start_step != window.start_step:
            raise ValueError("previous-day slice must cover the same window")
        x0 = np.concatenate([window.state.densities,
                             [window.state.in_station,
                              window.state.exit_queue]])
        s0 = self.estimates.beta_es * window.prev_exit_cell_outflow
        offset_d = lifted.offset_for(x0, s0)
        s0_prev = self.estimates.beta_es * prev.prev_exit_cell_outflow
        offset_prev = lifted.offset_for(prev.states[0], s0_prev)
        u_prev = prev.input_stack()
        x_prev = prev.state_stack()
        c_vec = offset_d + x_prev - lifted.state_map @ u_prev - offset_prev

        b_prev = lifted.rhs_for_data(prev.demand, prev.service_flows)
        if self.ctrl.ilc_queue_margin > 0.0:
            rows = lifted.rows_of("queue_limit")
            b_prev[rows] -= (self.ctrl.ilc_queue_margin
                             * self.cfg.station.queue_capacity)
        grad = gradient_estimate(lifted, x_prev, self.x_ref)
        step = (self.ctrl.ilc_step
                * self.ctrl.ilc_step_decay ** max(day_index - 1, 0))
        q = -self._W_prox @ u_prev + step * grad
        hi = work.bounds_from(b_prev, c_vec)
        warm_u, warm_y = self._warm_for("ilc", window.start_step, work)
        if warm_u is None:
            warm_u = u_prev
        u, y, status, it, rp, rd, viol, soft = work.solve(
            q, hi, warm_u, warm_y)
        self._warm[("ilc", window.start_step)] = (u, y)
        self._last = ("ilc", u, y)
        if status != "optimal" and viol > 1.0:
            # an unreliable learning update is worse than no update: keep
            # the previous iteration's inputs for this window (they were
            # realized on the plant, so they are consistent and safe)
            u = u_prev
        u_mat = np.maximum(u.reshape(K, ns), 0.0)
        self._record(day_index, window.start_step, "ilc", status, it, rp, rd,
                     viol, soft, float(u_mat[0, -1]))
        return u_mat

    def finish_day(self):
        """Reset the intra-day warm-start chain (window caches persist)."""
        self._last = None


def gradient_estimate(lifted: LiftedQP, x_prev: np.ndarray,
                      x_ref: Optional[np.ndarray] = None) -> np.ndarray:
    """Approximate gradient of the nominal objective at the previous
    iterate, using measured states in place of the model prediction."""
    if x_ref is None:
        x_ref = np.zeros(lifted.n_x)
    a = lifted.quad_scale
    return (a * (lifted.state_map.T
                 @ (lifted.quad_weight * (x_prev - x_ref)))
            + lifted.state_map.T @ lifted.lin_state_cost
            - lifted.lin_input_cost)


# -- one-shot entry points (thin wrappers over the persistent planner) -----

def mpc_plan(cfg: HighwayConfig, estimates: Estimates,
             window: HorizonWindow, ctrl: ControllerConfig,
             settings: SolverSettings = PLANNER_SETTINGS) -> np.ndarray:
    planner = RecedingHorizonPlanner(cfg, ctrl, estimates, settings)
    return planner.plan_mpc(window)


def ilc_plan(cfg: HighwayConfig, estimates: Estimates,
             window: HorizonWindow, prev: WindowSlice,
             ctrl: ControllerConfig,
             settings: SolverSettings = PLANNER_SETTINGS) -> np.ndarray:
    planner = RecedingHorizonPlanner(cfg, ctrl, estimates, settings)
    return planner.plan_ilc(window, prev, day_index=1)


# ---------------------------------------------------------------------------
# closed-loop day runner


def slice_record_window(record: IterationRecord, cfg: HighwayConfig,
                        k0: int, horizon: int) -> WindowSlice:
    """Window slice with the exit-cell bookkeeping resolved from cfg."""
    n = record.n_steps
    if not 0 <= k0 < n:
        raise IndexError(f"window start {k0} outside day of {n} steps")
    idx_states = np.minimum(np.arange(k0, k0 + horizon + 1), n)
    idx_inputs = np.minimum(np.arange(k0, k0 + horizon), n - 1)
    ell = cfg.station.exit_cell
    if k0 >= 1:
        prev_out = float(record.inputs[k0 - 1, ell + 1]
                         + record.station_inflows[k0 - 1])
    else:
        prev_out = 0.0
    return WindowSlice(
        start_step=k0,
        length=horizon,
        states=record.states[idx_states],
        inputs=record.inputs[idx_inputs],
        service_flows=record.service_flows[idx_inputs],
        station_inflows=record.station_inflows[idx_inputs],
        demand=record.demand[idx_inputs],
        prev_exit_cell_outflow=prev_out,
        tail_padded=bool(k0 + horizon > n),
    )


def run_day(cfg: HighwayConfig, demand: DemandProfile, kind: str,
            ctrl: Optional[ControllerConfig] = None,
            estimates: Optional[Estimates] = None,
            prev_record: Optional[IterationRecord] = None,
            day_index: int = 0,
            planner: Optional[RecedingHorizonPlanner] = None,
            initial_state: Optional[PlantState] = None,
            settings: SolverSettings = PLANNER_SETTINGS
            ) -> tuple[IterationRecord, Trajectory]:
    """Simulate one day (one repetition of the demand pattern) closed-loop.

    ``kind`` selects the controller; for ``ilc`` with no previous record
    the day falls back to the estimate-based MPC (there is nothing to
    learn from yet) only when ``day_index`` is 0, otherwise it is an error.
    """
    if kind not in CONTROLLER_KINDS:
        raise ValueError(f"unknown controller kind {kind!r}")
    n_steps = len(demand)
    state = (initial_state.copy() if initial_state is not None
             else PlantState.empty(cfg))
    ns = cfg.n_cells + 2

    if kind == "uncontrolled":
        traj = simulate(cfg, demand, None, state, n_steps)
        return _record_from_traj(traj, demand, cfg, day_index), traj

    if ctrl is None:
        ctrl = ControllerConfig()
    if kind == "mpc_gt":
        estimates = Estimates(beta_es=cfg.station.split_ratio,
                              delta_es_steps=cfg.station.service_delay_steps,
                              demand_es=demand)
    if estimates is None:
        raise ValueError(f"controller kind {kind!r} requires estimates")
    if kind == "ilc" and prev_record is None and day_index > 0:
        raise ValueError("ilc beyond day 0 requires the previous record")
    use_ilc = kind == "ilc" and prev_record is not None
    if planner is None:
        planner = RecedingHorizonPlanner(cfg, ctrl, estimates, settings)

    p = ctrl.update_period
    states = [np.concatenate([state.densities,
                              [state.in_station, state.exit_queue]])]
    inputs = np.zeros((n_steps, ns))
    service = np.zeros(n_steps)
    inflows = np.zeros(n_steps)
    metering = np.zeros(n_steps)
    traj_states = [state]
    traj_outputs: list[StepOutput] = []
    r_cmd = np.zeros(n_steps)

    for k in range(n_steps):
        if k % p == 0:
            window = HorizonWindow(
                start_step=k, length=ctrl.horizon, state=state,
                history_slice=planner.history_window(k, inflows[:k]),
                prev_exit_cell_outflow=state.prev_exit_cell_outflow)
            if use_ilc:
                prev_slice = slice_record_window(prev_record, cfg, k,
                                                 ctrl.horizon)
                plan = planner.plan_ilc(window, prev_slice, day_index)
            else:
                plan = planner.plan_mpc(window, day_index)
            span = min(p, n_steps - k)
            r_cmd[k:k + span] = plan[:span, -1]
        state, out = step(state, demand.at(k), float(r_cmd[k]), cfg)
        traj_states.append(state)
        traj_outputs.append(out)
        states.append(np.concatenate([state.densities,
                                      [state.in_station, state.exit_queue]]))
        inputs[k, :ns - 1] = out.interface_flows
        inputs[k, ns - 1] = out.station_outflow
        service[k] = out.service_to_queue_flow
        inflows[k] = out.station_inflow
        metering[k] = r_cmd[k]
    planner.finish_day()

    record = IterationRecord(
        day_index=day_index, states=np.array(states), inputs=inputs,
        service_flows=service, station_inflows=inflows,
        demand=np.array([demand.at(k) for k in range(n_steps)]),
        metering=metering)
    return record, Trajectory(states=traj_states, outputs=traj_outputs)


def _record_from_traj(traj: Trajectory, demand: DemandProfile,
                      cfg: HighwayConfig, day_index: int) -> IterationRecord:
    n_steps = len(traj)
    ns = cfg.n_cells + 2
    states = np.array([np.concatenate([s.densities,
                                       [s.in_station, s.exit_queue]])
                       for s in traj.states])
    inputs = np.zeros((n_steps, ns))
    service = np.zeros(n_steps)
    inflows = np.zeros(n_steps)
    for k, out in enumerate(traj.outputs):
        inputs[k, :ns - 1] = out.interface_flows
        inputs[k, ns - 1] = out.station_outflow
        service[k] = out.service_to_queue_flow
        inflows[k] = out.station_inflow
    return IterationRecord(
        day_index=day_index, states=states, inputs=inputs,
        service_flows=service, station_inflows=inflows,
        demand=np.array([demand.at(k) for k in range(n_steps)]),
        metering=np.full(n_steps, cfg.station.ramp_capacity))


# ---------------------------------------------------------------------------
# relaxation-tightness diagnostics


_TIGHT_FAMILIES = ("demand_upstream", "demand_cell", "cap_upstream_cell",
                   "supply_cell", "cap_cell")


def tightness_report(lifted: LiftedQP, cfg: HighwayConfig, u: np.ndarray,
                     b: Optional[np.ndarray] = None,
                     rel_tol: float = 1e-4,
                     flow_floor: float = 1e-3,
                     return_counts: bool = False):
    """Share of positive predicted flows pinned against a relaxed bound.

    For every non-merge interface and window step with a positive flow,
    checks whether at least one of its demand/supply/capacity rows is
    active within ``rel_tol`` times the local capacity. Returns the
    fraction in [0, 1], or the raw ``(tight, total)`` pair when
    ``return_counts`` is set (useful for aggregating several windows).
    """
    x = lifted.predict(u)
    b = lifted.ineq_rhs if b is None else b
    slack = b - (lifted.ineq_state @ x + lifted.ineq_input @ u)
    fam_mask = np.isin(lifted.row_family,
                       [i for i, name in enumerate(ROW_FAMILIES)
                        if name in _TIGHT_FAMILIES])
    ns = lifted.block_size
    K = lifted.horizon
    u_mat = u.reshape(K, ns)
    total = 0
    tight = 0
    caps = np.array([c.capacity for c in cfg.cells])
    for t in range(K):
        for i in range(cfg.n_cells + 1):
            if i == cfg.station.merge_cell:
                continue
            if u_mat[t, i] <= flow_floor:
                continue
            rows = np.flatnonzero(
                fam_mask & (lifted.row_step == t)
                & (lifted.row_interface == i))
            cap = caps[min(i, cfg.n_cells - 1)]
            total += 1
            if np.any(slack[rows] <= rel_tol * cap):
                tight += 1
    if return_counts:
        return tight, total
    return 1.0 if total == 0 else tight / total
