"""Embedded convex QP solver based on operator splitting (ADMM).

Solves

    min  1/2 z' P z + q' z
    s.t. A_eq z = b_eq,  A_in z <= b_in,  z_i >= 0 for masked i

by reduction to the box form ``lo <= A z <= hi`` and an over-relaxed
ADMM iteration with Ruiz equilibration, a cached dense Cholesky
factorization and step-size (rho) adaptation. Geared to the planning
problems of this package (n around 1500-3100, a few thousand rows) but
general enough for small dense instances.

``BoxADMM`` is the reusable workspace: for a fixed (P, A) sparsity and
values, only the linear cost and the bounds change between solves, so
receding-horizon callers pay the equilibration and factorization once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

__all__ = [
    "SolverSettings",
    "QPProblem",
    "QPSolution",
    "BoxADMM",
    "solve",
    "kkt_residuals",
]

_INF = np.inf


@dataclass(frozen=True)
class SolverSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 20000
    rho: float = 0.1
    rho_eq_scale: float = 1e3
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling_iters: int = 10
    check_interval: int = 25
    adaptive_rho: bool = True
    adapt_interval: int = 100
    adapt_threshold: float = 5.0
    eps_infeas: float = 1e-9   # nonpositive disables detection
    stall_window: int = 0      # iterations without residual progress before
                               # giving up early (0 disables the check)


def _dense(mat) -> np.ndarray:
    if sp.issparse(mat):
        return mat.toarray()
    return np.asarray(mat, dtype=float)


class BoxADMM:
    """ADMM workspace for ``min 1/2 z'Pz + q'z  s.t. lo <= Az <= hi``.

    Rows with ``lo == hi`` are treated as equalities and weighted more
    heavily in the splitting. The factorization depends only on (P, A,
    rho, sigma); updating q, lo, hi between solves is cheap.
    """

    def __init__(self, P, q, A, lo, hi,
                 settings: SolverSettings = SolverSettings(),
                 matvec=None, rmatvec=None):
        """``matvec``/``rmatvec`` optionally provide ``A @ v`` and
        ``A.T @ v`` products exploiting structure in A; the dense matrix
        is still used once for scaling and the cached Gram matrix."""
        self.settings = settings
        self._mv = matvec
        self._rmv = rmatvec
        P = _dense(P)
        A = _dense(A)
        q = np.asarray(q, dtype=float)
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        n = P.shape[0]
        m = A.shape[0]
        if P.shape != (n, n) or q.shape != (n,):
            raise ValueError("inconsistent P/q dimensions")
        if A.shape[1] != n or lo.shape != (m,) or hi.shape != (m,):
            raise ValueError("inconsistent A/lo/hi dimensions")
        if np.any(np.isnan(P)) or np.any(np.isnan(q)) or np.any(np.isnan(A)):
            raise ValueError("NaN in problem data")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        self.n, self.m = n, m
        self.P_raw = P
        self.A_raw = A

        self._equilibrate(P, A)
        self.q_raw = q
        self.qb = self.c * self.D * q
        self.lob = self.E * lo
        self.hib = self.E * hi
        eq = np.isfinite(lo) & np.isfinite(hi) & (hi - lo < 1e-12)
        self.rho_base = np.where(eq, settings.rho_eq_scale, 1.0)
        # cached Gram matrix for cheap refactorization on rho updates
        self.S0 = (self.Ab * self.rho_base[:, None]).T @ self.Ab
        self.rho_scalar = settings.rho
        self._factor()
        self._x = np.zeros(n)
        self._z = np.zeros(m)
        self._y = np.zeros(m)
        if self._mv is not None:
            # structured products replace the stacked matrix entirely
            self.Ab = None
            self.A_raw = None

    # -- matrix products ----------------------------------------------------
    def _Amul(self, x):
        if self._mv is not None:
            return self.E * self._mv(self.D * x)
        return self.Ab @ x

    def _ATmul(self, y):
        if self._rmv is not None:
            return self.D * self._rmv(self.E * y)
        return self.Ab.T @ y

    def _Araw_mul(self, v):
        if self._mv is not None:
            return self._mv(v)
        return self.A_raw @ v

    def _Araw_tmul(self, v):
        if self._rmv is not None:
            return self._rmv(v)
        return self.A_raw.T @ v

    # -- setup ------------------------------------------------------------
    def _equilibrate(self, P, A):
        """Modified Ruiz equilibration of the stacked KKT matrix."""
        n, m = self.n, self.m
        D = np.ones(n)
        E = np.ones(m)
        c = 1.0
        Pb, Ab = P.copy(), A.copy()
        qnorm_guard = 1e-8
        for _ in range(self.settings.scaling_iters):
            col_p = np.max(np.abs(Pb), axis=0) if n else np.zeros(0)
            col_a = np.max(np.abs(Ab), axis=0) if m else np.zeros(n)
            col = np.maximum(col_p, col_a)
            row_a = np.max(np.abs(Ab), axis=1) if m else np.zeros(0)
            d = 1.0 / np.sqrt(np.maximum(col, qnorm_guard))
            e = 1.0 / np.sqrt(np.maximum(row_a, qnorm_guard))
            e[row_a == 0.0] = 1.0  # keep all-zero rows unscaled
            d = np.clip(d, 1e-4, 1e4)
            e = np.clip(e, 1e-4, 1e4)
            Pb = d[:, None] * Pb * d[None, :]
            Ab = e[:, None] * Ab * d[None, :]
            D *= d
            E *= e
            # cost scaling keeps the quadratic part near unit magnitude
            pcols = np.max(np.abs(Pb), axis=0)
            mean_p = np.mean(pcols[pcols > 0]) if np.any(pcols > 0) else 0.0
            if mean_p > 0:
                gamma = 1.0 / max(mean_p, qnorm_guard)
                gamma = min(max(gamma, 1e-4), 1e4)
                Pb *= gamma
                c *= gamma
        self.D, self.E, self.c = D, E, c
        self.Pb, self.Ab = Pb, Ab

    def _factor(self):
        H = self.Pb + self.settings.sigma * np.eye(self.n) \
            + self.rho_scalar * self.S0
        self._chol = sla.cho_factor(H, lower=True, check_finite=False)

    # -- data updates -------------------------------------------------------
    def update(self, q=None, lo=None, hi=None):
        if q is not None:
            self.q_raw = np.asarray(q, dtype=float)
            if np.any(np.isnan(self.q_raw)):
                raise ValueError("NaN in linear cost")
            self.qb = self.c * self.D * self.q_raw
        if lo is not None:
            lo = np.asarray(lo, dtype=float)
            self.lob = self.E * lo
        if hi is not None:
            hi = np.asarray(hi, dtype=float)
            self.hib = self.E * hi
        if np.any(self.lob > self.hib + 1e-12):
            raise ValueError("lower bound exceeds upper bound")

    # -- solve --------------------------------------------------------------
    def solve(self, x0: Optional[np.ndarray] = None,
              y0: Optional[np.ndarray] = None):
        """Run the iteration; returns (x, y, status, iterations, rp, rd).

        ``x0``/``y0`` warm-start the primal/dual iterates (unscaled).
        """
        st = self.settings
        if x0 is not None:
            self._x = x0 / self.D
            self._z = self._Amul(self._x)
        if y0 is not None:
            self._y = self.c * y0 / self.E
        x, z, y = self._x, self._z, self._y
        rho = self.rho_scalar * self.rho_base
        rho_inv = 1.0 / rho
        status = "max_iterations"
        rp = rd = np.inf
        it = 0
        infeas_hits = 0
        best_gap = np.inf
        best_gap_it = 0
        y_prev = y.copy()
        x_prev = x.copy()
        while it < st.max_iter:
            it += 1
            rhs = st.sigma * x - self.qb + self._ATmul(rho * z - y)
            xt = sla.cho_solve(self._chol, rhs, check_finite=False)
            zt = self._Amul(xt)
            x = st.alpha * xt + (1.0 - st.alpha) * x
            z_relaxed = st.alpha * zt + (1.0 - st.alpha) * z
            z = np.clip(z_relaxed + rho_inv * y, self.lob, self.hib)
            y = y + rho * (z_relaxed - z)

            if it % st.check_interval == 0 or it == st.max_iter:
                rp, rd, eps_p, eps_d, ratio = self._residuals(x, z, y)
                if rp <= eps_p and rd <= eps_d:
                    status = "optimal"
                    break
                if st.stall_window > 0:
                    gap = max(rp / eps_p, rd / eps_d)
                    if gap < 0.95 * best_gap:
                        best_gap = gap
                        best_gap_it = it
                    elif it - best_gap_it >= st.stall_window:
                        status = "stalled"
                        break
                if st.eps_infeas > 0:
                    if (self._primal_infeasible(y - y_prev)
                            or self._dual_infeasible(x - x_prev)):
                        infeas_hits += 1
                        # demand a persistent certificate before giving up
                        if infeas_hits >= 3:
                            status = "infeasible_detected"
                            break
                    else:
                        infeas_hits = 0
                y_prev = y.copy()
                x_prev = x.copy()
                if st.adaptive_rho and it % st.adapt_interval == 0:
                    if (ratio > st.adapt_threshold
                            or ratio < 1.0 / st.adapt_threshold):
                        self.rho_scalar = float(
                            np.clip(self.rho_scalar * ratio, 1e-6, 1e6))
                        self._factor()
                        rho = self.rho_scalar * self.rho_base
                        rho_inv = 1.0 / rho
        self._x, self._z, self._y = x, z, y
        x_un = self.D * x
        y_un = self.E * y / self.c
        return x_un, y_un, status, it, rp, rd

    def _residuals(self, x, z, y):
        """Unscaled residuals/tolerances plus the step-size ratio.

        Termination uses unscaled quantities; the rho-adaptation ratio is
        computed in the scaled geometry, where the iteration actually
        runs, so the step size tracks the scaled residual balance.
        """
        st = self.settings
        Ax = self._Amul(x)
        rp_vec = (Ax - z) / self.E
        Px = self.Pb @ x
        Aty = self._ATmul(y)
        rd_vec = (Px + self.qb + Aty) / self.D / self.c
        rp = float(np.max(np.abs(rp_vec))) if self.m else 0.0
        rd = float(np.max(np.abs(rd_vec))) if self.n else 0.0
        ax_n = float(np.max(np.abs(Ax / self.E))) if self.m else 0.0
        z_n = float(np.max(np.abs(z / self.E))) if self.m else 0.0
        eps_p = st.eps_abs + st.eps_rel * max(ax_n, z_n)
        px_n = float(np.max(np.abs(Px / self.D / self.c)))
        aty_n = float(np.max(np.abs(Aty / self.D / self.c)))
        q_n = float(np.max(np.abs(self.q_raw))) if self.n else 0.0
        eps_d = st.eps_abs + st.eps_rel * max(px_n, aty_n, q_n)
        rp_s = float(np.max(np.abs(Ax - z))) if self.m else 0.0
        dp_s = max(float(np.max(np.abs(Ax))) if self.m else 0.0,
                   float(np.max(np.abs(z))) if self.m else 0.0, 1e-12)
        rd_s = float(np.max(np.abs(Px + self.qb + Aty)))
        dd_s = max(float(np.max(np.abs(Px))),
                   float(np.max(np.abs(Aty))),
                   float(np.max(np.abs(self.qb))), 1e-12)
        ratio = math.sqrt((rp_s / dp_s) / max(rd_s / dd_s, 1e-30))
        return rp, rd, eps_p, eps_d, ratio

    def _primal_infeasible(self, dy) -> bool:
        dy_un = self.E * dy / self.c
        nrm = float(np.max(np.abs(dy_un))) if self.m else 0.0
        if nrm < 1e-12:
            return False
        dy_n = dy_un / nrm
        at_dy = self._Araw_tmul(dy_n)
        if float(np.max(np.abs(at_dy))) > self.settings.eps_infeas * 1e3:
            return False
        lo = self.lob / self.E
        hi = self.hib / self.E
        pos = np.where(dy_n > 0, dy_n, 0.0)
        neg = np.where(dy_n < 0, dy_n, 0.0)
        if np.any(~np.isfinite(hi) & (pos > 1e-9)):
            return False
        if np.any(~np.isfinite(lo) & (neg < -1e-9)):
            return False
        support = float(np.dot(hi[np.isfinite(hi)], pos[np.isfinite(hi)])
                        + np.dot(lo[np.isfinite(lo)], neg[np.isfinite(lo)]))
        return support < -self.settings.eps_infeas * 1e3

    def _dual_infeasible(self, dx) -> bool:
        dx_un = self.D * dx
        nrm = float(np.max(np.abs(dx_un)))
        if nrm < 1e-12:
            return False
        dx_n = dx_un / nrm
        if float(np.max(np.abs(self.P_raw @ dx_n))) > self.settings.eps_infeas * 1e3:
            return False
        if float(np.dot(self.q_raw, dx_n)) >= -self.settings.eps_infeas * 1e3:
            return False
        Adx = self._Araw_mul(dx_n)
        lo = self.lob / self.E
        hi = self.hib / self.E
        ok_up = ~np.isfinite(hi) | (Adx <= self.settings.eps_infeas * 1e3)
        ok_lo = ~np.isfinite(lo) | (Adx >= -self.settings.eps_infeas * 1e3)
        return bool(np.all(ok_up & ok_lo))


@dataclass
class QPProblem:
    """Standard-form convex QP (see module docstring)."""

    P: np.ndarray
    q: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None
    nonneg: Optional[np.ndarray] = None  # boolean mask over variables

    def __post_init__(self):
        self.P = _dense(self.P)
        self.q = np.asarray(self.q, dtype=float)
        n = len(self.q)
        if self.P.shape != (n, n):
            raise ValueError("P must be square and match q")
        if float(np.max(np.abs(self.P - self.P.T), initial=0.0)) > 1e-12:
            raise ValueError("P must be symmetric within 1e-12")
        for amat, bvec, name in ((self.A_eq, self.b_eq, "eq"),
                                 (self.A_in, self.b_in, "in")):
            if (amat is None) != (bvec is None):
                raise ValueError(f"A_{name} and b_{name} must come together")
            if amat is not None:
                amat = _dense(amat)
                if amat.shape[1] != n or amat.shape[0] != len(np.asarray(bvec)):
                    raise ValueError(f"A_{name}/b_{name} dimension mismatch")
        if self.A_eq is not None:
            self.A_eq = _dense(self.A_eq)
            self.b_eq = np.asarray(self.b_eq, dtype=float)
        if self.A_in is not None:
            self.A_in = _dense(self.A_in)
            self.b_in = np.asarray(self.b_in, dtype=float)
        if self.nonneg is not None:
            self.nonneg = np.asarray(self.nonneg, dtype=bool)
            if self.nonneg.shape != (n,):
                raise ValueError("nonneg mask must have one flag per variable")

    @property
    def n(self) -> int:
        return len(self.q)

    def box_form(self):
        """(A, lo, hi) stacking equalities, inequalities and sign rows."""
        n = self.n
        blocks, los, his = [], [], []
        if self.A_eq is not None:
            blocks.append(self.A_eq)
            los.append(self.b_eq)
            his.append(self.b_eq)
        if self.A_in is not None:
            blocks.append(self.A_in)
            los.append(np.full(len(self.b_in), -_INF))
            his.append(self.b_in)
        if self.nonneg is not None and np.any(self.nonneg):
            idx = np.flatnonzero(self.nonneg)
            eye = np.zeros((len(idx), n))
            eye[np.arange(len(idx)), idx] = 1.0
            blocks.append(eye)
            los.append(np.zeros(len(idx)))
            his.append(np.full(len(idx), _INF))
        if not blocks:
            A = np.zeros((0, n))
            return A, np.zeros(0), np.zeros(0)
        return (np.vstack(blocks), np.concatenate(los), np.concatenate(his))

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.P @ z + self.q @ z)


@dataclass
class QPSolution:
    z_star: np.ndarray
    objective: float
    status: str  # optimal | max_iterations | stalled | infeasible_detected
    primal_residual: float
    dual_residual: float
    iterations: int
    duals_eq: Optional[np.ndarray] = None
    duals_in: Optional[np.ndarray] = None
    duals_nonneg: Optional[np.ndarray] = None


def solve(problem: QPProblem, settings: SolverSettings = SolverSettings(),
          warm_start: Optional[np.ndarray] = None) -> QPSolution:
    """Solve a standard-form QP; see SolverSettings for termination rules."""
    A, lo, hi = problem.box_form()
    work = BoxADMM(problem.P, problem.q, A, lo, hi, settings)
    z, y, status, it, rp, rd = work.solve(x0=warm_start)
    n_eq = 0 if problem.A_eq is None else len(problem.b_eq)
    n_in = 0 if problem.A_in is None else len(problem.b_in)
    duals_eq = y[:n_eq] if n_eq else None
    duals_in = np.maximum(y[n_eq:n_eq + n_in], 0.0) if n_in else None
    duals_nonneg = None
    if problem.nonneg is not None and np.any(problem.nonneg):
        mult = np.zeros(problem.n)
        mult[np.flatnonzero(problem.nonneg)] = \
            np.maximum(-y[n_eq + n_in:], 0.0)
        duals_nonneg = mult
    return QPSolution(
        z_star=z,
        objective=problem.objective(z),
        status=status,
        primal_residual=rp,
        dual_residual=rd,
        iterations=it,
        duals_eq=duals_eq,
        duals_in=duals_in,
        duals_nonneg=duals_nonneg,
    )


def kkt_residuals(problem: QPProblem, z: np.ndarray,
                  multipliers: Optional[dict] = None
                  ) -> tuple[float, float, float]:
    """Infinity norms of the KKT residuals at (z, multipliers).

    ``multipliers`` may carry 'eq', 'in' (>= 0) and 'nonneg' (>= 0)
    arrays; missing entries count as zero.
    """
    multipliers = multipliers or {}
    n = problem.n
    z = np.asarray(z, dtype=float)
    y_eq = np.asarray(multipliers.get("eq", np.zeros(0)), dtype=float)
    y_in = np.asarray(multipliers.get("in", np.zeros(0)), dtype=float)
    mu = np.asarray(multipliers.get("nonneg", np.zeros(n)), dtype=float)

    stat = problem.P @ z + problem.q
    if problem.A_eq is not None and len(y_eq):
        stat = stat + problem.A_eq.T @ y_eq
    if problem.A_in is not None and len(y_in):
        stat = stat + problem.A_in.T @ y_in
    if problem.nonneg is not None and len(mu):
        stat = stat - mu * problem.nonneg
    stationarity = float(np.max(np.abs(stat), initial=0.0))

    primal = 0.0
    comp = 0.0
    if problem.A_eq is not None:
        primal = max(primal,
                     float(np.max(np.abs(problem.A_eq @ z - problem.b_eq),
                                  initial=0.0)))
    if problem.A_in is not None:
        slack = problem.A_in @ z - problem.b_in
        primal = max(primal, float(np.max(np.maximum(slack, 0.0), initial=0.0)))
        if len(y_in):
            comp = max(comp, float(np.max(np.abs(y_in * slack), initial=0.0)))
    if problem.nonneg is not None:
        viol = np.maximum(-z[problem.nonneg], 0.0)
        primal = max(primal, float(np.max(viol, initial=0.0)))
        comp = max(comp, float(np.max(np.abs(mu * z * problem.nonneg),
                                      initial=0.0)))
    return stationarity, primal, comp
