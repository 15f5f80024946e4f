"""Dense LP / strictly-convex QP backend plus LQR and chi-square helpers.

The LP path wraps scipy's HiGHS solver and the QP path wraps cvxopt's
interior-point cone solver; both are dense, deterministic, and checked
against the residual contracts below (primal feasibility <= 1e-8 for
LPs, KKT residual <= 1e-6 for QPs). Problem sizes here are at most a few
hundred variables, so dense solvers are the simple, reproducible choice.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize as sciopt
from scipy import stats as scistats

import cvxopt

cvxopt.solvers.options.update({
    "show_progress": False,
    "abstol": 1e-9,
    "reltol": 1e-9,
    "feastol": 1e-9,
    "maxiters": 200,
})


class SolveKind(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAXITER = "maxiter"


@dataclass
class SolveStatus:
    kind: SolveKind
    objective: float = np.nan
    primal: np.ndarray | None = None
    dual: np.ndarray | None = None
    kkt_residual: float = np.nan

    @property
    def optimal(self):
        return self.kind == SolveKind.OPTIMAL


@dataclass
class QuadraticProgram:
    """min 1/2 x'Hx + g'x  s.t.  A_ineq x <= b_ineq, A_eq x = b_eq."""

    H: np.ndarray
    g: np.ndarray
    A_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        if self.A_ineq is not None:
            self.A_ineq = np.atleast_2d(np.asarray(self.A_ineq, dtype=float))
            self.b_ineq = np.atleast_1d(np.asarray(self.b_ineq, dtype=float))
        if self.A_eq is not None:
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
            self.b_eq = np.atleast_1d(np.asarray(self.b_eq, dtype=float))
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > 1e-10:
            raise ValueError("H must be symmetric to 1e-10")
        self.H = 0.5 * (self.H + self.H.T)
        # PSD check with a small diagonal shift tolerance.
        try:
            np.linalg.cholesky(self.H + 1e-10 * np.eye(self.H.shape[0]))
        except np.linalg.LinAlgError:
            raise ValueError("H must be positive semidefinite") from None

    @property
    def n(self):
        return self.g.size


def solve_lp(c, A_ineq=None, b_ineq=None, A_eq=None, b_eq=None, max_iter=10_000):
    """min c'x s.t. A_ineq x <= b_ineq, A_eq x = b_eq (variables free)."""
    c = np.asarray(c, dtype=float)
    res = sciopt.linprog(
        c,
        A_ub=A_ineq,
        b_ub=b_ineq,
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=(None, None),
        method="highs",
        options={"maxiter": max_iter},
    )
    if res.status == 2:
        return SolveStatus(SolveKind.INFEASIBLE)
    if res.status == 3:
        return SolveStatus(SolveKind.UNBOUNDED)
    if res.status == 1:
        return SolveStatus(SolveKind.MAXITER)
    if res.status != 0:
        return SolveStatus(SolveKind.MAXITER)
    dual = None
    if A_ineq is not None and res.ineqlin is not None:
        dual = -np.asarray(res.ineqlin.marginals, dtype=float)
    return SolveStatus(
        SolveKind.OPTIMAL,
        objective=float(res.fun),
        primal=np.asarray(res.x, dtype=float),
        dual=dual,
        kkt_residual=_lp_feas_residual(res.x, A_ineq, b_ineq, A_eq, b_eq),
    )


def _lp_feas_residual(x, A_ineq, b_ineq, A_eq, b_eq):
    r = 0.0
    if A_ineq is not None:
        r = max(r, float(np.max(np.asarray(A_ineq) @ x - np.asarray(b_ineq), initial=0.0)))
    if A_eq is not None:
        r = max(r, float(np.max(np.abs(np.asarray(A_eq) @ x - np.asarray(b_eq)), initial=0.0)))
    return max(r, 0.0)


def qp_kkt_residual(qp, x, z=None):
    """Max of stationarity, primal-feasibility, complementarity residuals."""
    grad = qp.H @ x + qp.g
    res_feas = 0.0
    res_comp = 0.0
    if qp.A_ineq is not None and qp.A_ineq.size:
        slack = qp.b_ineq - qp.A_ineq @ x
        res_feas = max(res_feas, float(np.max(-slack, initial=0.0)))
        if z is not None:
            grad = grad + qp.A_ineq.T @ z
            res_comp = float(np.max(np.abs(z * slack), initial=0.0))
    if qp.A_eq is not None and qp.A_eq.size:
        res_feas = max(res_feas, float(np.max(np.abs(qp.A_eq @ x - qp.b_eq), initial=0.0)))
        # Project the equality multipliers out of the stationarity residual.
        sol, *_ = np.linalg.lstsq(qp.A_eq.T, -grad, rcond=None)
        grad = grad + qp.A_eq.T @ sol
    elif z is None and qp.A_ineq is not None and qp.A_ineq.size:
        sol, *_ = np.linalg.lstsq(qp.A_ineq.T, -grad, rcond=None)
        grad = grad + qp.A_ineq.T @ np.maximum(sol, 0.0)
    res_stat = float(np.max(np.abs(grad), initial=0.0))
    return max(res_stat, res_feas, res_comp)


def solve_qp(qp: QuadraticProgram) -> SolveStatus:
    """Interior-point solve of a convex QP; see QuadraticProgram for form."""
    n = qp.n
    if (qp.A_ineq is None or qp.A_ineq.size == 0) and (qp.A_eq is None or qp.A_eq.size == 0):
        try:
            x = np.linalg.solve(qp.H, -qp.g)
        except np.linalg.LinAlgError:
            return SolveStatus(SolveKind.UNBOUNDED)
        obj = 0.5 * x @ qp.H @ x + qp.g @ x
        return SolveStatus(SolveKind.OPTIMAL, objective=float(obj), primal=x,
                           kkt_residual=qp_kkt_residual(qp, x))
    P = cvxopt.matrix(qp.H)
    q = cvxopt.matrix(qp.g)
    G = h = A = b = None
    if qp.A_ineq is not None and qp.A_ineq.size:
        G = cvxopt.matrix(np.atleast_2d(qp.A_ineq))
        h = cvxopt.matrix(np.asarray(qp.b_ineq, dtype=float))
    else:
        # cvxopt requires at least one cone constraint; add a vacuous one.
        G = cvxopt.matrix(np.zeros((1, n)))
        h = cvxopt.matrix(np.ones(1))
    if qp.A_eq is not None and qp.A_eq.size:
        A = cvxopt.matrix(np.atleast_2d(qp.A_eq))
        b = cvxopt.matrix(np.asarray(qp.b_eq, dtype=float))
    try:
        if A is not None:
            sol = cvxopt.solvers.qp(P, q, G, h, A, b)
        else:
            sol = cvxopt.solvers.qp(P, q, G, h)
    except (ValueError, ArithmeticError):
        # Solver blew up; a feasibility LP tells infeasible apart from a
        # genuine numerical failure.
        feas = solve_lp(np.zeros(n), qp.A_ineq, qp.b_ineq, qp.A_eq, qp.b_eq)
        if feas.kind == SolveKind.INFEASIBLE:
            return SolveStatus(SolveKind.INFEASIBLE)
        return SolveStatus(SolveKind.MAXITER)
    if sol["status"] == "primal infeasible":
        return SolveStatus(SolveKind.INFEASIBLE)
    if sol["status"] == "dual infeasible":
        return SolveStatus(SolveKind.UNBOUNDED)
    x = np.array(sol["x"]).ravel()
    z = np.array(sol["z"]).ravel() if sol["z"] is not None else None
    if qp.A_ineq is None or not qp.A_ineq.size:
        z = None
    kkt = qp_kkt_residual(qp, x, z)
    if sol["status"] != "optimal":
        # "unknown": decide between near-optimal and genuinely failed.
        if kkt > 1e-6:
            feas = solve_lp(np.zeros(n), qp.A_ineq, qp.b_ineq, qp.A_eq, qp.b_eq)
            if feas.kind == SolveKind.INFEASIBLE:
                return SolveStatus(SolveKind.INFEASIBLE)
            return SolveStatus(SolveKind.MAXITER, primal=x, kkt_residual=kkt)
    obj = 0.5 * x @ qp.H @ x + qp.g @ x
    return SolveStatus(SolveKind.OPTIMAL, objective=float(obj), primal=x, dual=z,
                       kkt_residual=kkt)


def dlqr(A, B, Q, R, max_iter=100_000, tol=1e-10):
    """Infinite-horizon discrete LQR gain and cost-to-go matrix.

    Fixed-point iteration on the discrete algebraic Riccati equation until
    the residual drops below `tol`. Returns (K, P) with u = -Kx and
    spectral radius of A - BK < 1.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ K
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol:
            P = P_next
            break
        P = P_next
    else:
        raise RuntimeError("Riccati iteration did not converge")
    BtP = B.T @ P
    K = np.linalg.solve(R + BtP @ B, BtP @ A)
    if np.max(np.abs(np.linalg.eigvals(A - B @ K))) >= 1.0:
        raise RuntimeError("closed loop not stable; (A, B) may not be stabilizable")
    return K, P


def riccati_residual(A, B, Q, R, P):
    BtP = B.T @ P
    K = np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.max(np.abs(Q + A.T @ P @ A - A.T @ P @ B @ K - P)))


def chi_square_quantile(dof, p):
    """p-quantile of the chi-square distribution with `dof` degrees of freedom."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if dof < 1:
        raise ValueError("dof must be a positive integer")
    return float(scistats.chi2.ppf(p, dof))
