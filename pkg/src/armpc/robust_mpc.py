"""Tube MPC with causal affine disturbance feedback, compiled to a dense QP.

The policy class is u_k = ubar_k + sum_{j<k} K_kj d_j with the
disturbance sequence ranging over the N-fold product of a per-step box.
Every polytopic constraint on the realized trajectory is robustified
exactly over that box: the disturbance coefficient of each constraint
row is affine in the decision variables, so its absolute value is lifted
with slack variables and the box radii multiply the slacks. The cost is
the nominal trajectory cost, so the QP is strictly convex in ubar; the
gains and slacks carry a tiny quadratic regularizer to pin them down
deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry, invariant, optimization
from .geometry import Box, Polytope
from .optimization import QuadraticProgram, SolveKind, SolveStatus

GAIN_REG = 1e-9


@dataclass
class RobustMPCProblem:
    A: np.ndarray
    B: np.ndarray
    N: int
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    K_term: np.ndarray
    X: Polytope
    U_eff: Polytope
    D_box: Box
    O: Polytope | None  # None encodes an empty terminal set

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.K_term = np.atleast_2d(np.asarray(self.K_term, dtype=float))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def validate(self):
        if np.min(np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))) < -1e-10:
            raise ValueError("Q must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(0.5 * (self.R + self.R.T))) <= 0.0:
            raise ValueError("R must be positive definite")
        A_cl = self.A - self.B @ self.K_term
        decrease = A_cl.T @ self.P @ A_cl - self.P + self.Q \
            + self.K_term.T @ self.R @ self.K_term
        if np.max(np.linalg.eigvalsh(0.5 * (decrease + decrease.T))) > 1e-8:
            raise ValueError("terminal cost does not satisfy the Lyapunov decrease")
        if self.X.dim != self.n or self.U_eff.dim != self.m or self.D_box.dim != self.n:
            raise ValueError("constraint set dimensions inconsistent with A, B")
        if self.N < 1:
            raise ValueError("horizon must be at least 1")


@dataclass
class MPCSolution:
    status: SolveKind
    u0: np.ndarray | None = None
    nominal_states: np.ndarray | None = None   # (N+1, n)
    nominal_inputs: np.ndarray | None = None   # (N, m)
    gains: dict | None = None                  # (k, j) -> (m, n)
    objective: float = np.nan
    kkt_residual: float = np.nan

    @property
    def optimal(self):
        return self.status == SolveKind.OPTIMAL


class _Row:
    """One robustified constraint row collected during compilation."""

    __slots__ = ("lin", "const_rhs", "rhs_x0", "slack_terms", "tag")

    def __init__(self, n_base, n, tag):
        self.lin = np.zeros(n_base)
        self.const_rhs = 0.0          # moves to the RHS
        self.rhs_x0 = np.zeros(n)     # rhs -= rhs_x0 @ x0
        self.slack_terms = []         # (radius, expr_lin, expr_const)
        self.tag = tag


class CompiledMPC:
    """x0-independent compilation of a RobustMPCProblem.

    `solve(x0)` assembles the x0-dependent pieces (cost gradient and
    right-hand sides) and hands the QP to the backend. The empty-terminal
    case short-circuits to Infeasible.
    """

    def __init__(self, problem: RobustMPCProblem):
        problem.validate()
        self.problem = problem
        self.empty_terminal = problem.O is None or (
            isinstance(problem.O, Polytope) and problem.O.is_empty()
        )
        if not self.empty_terminal:
            self._build()

    # -- variable layout ---------------------------------------------------

    def _gain_index(self, k, j):
        return self._gain_offsets[(k, j)]

    def _build(self):
        p = self.problem
        n, m, N = p.n, p.m, p.N
        self.nu = N * m
        self._gain_offsets = {}
        off = self.nu
        for k in range(1, N):
            for j in range(k):
                self._gain_offsets[(k, j)] = off
                off += m * n
        self.n_base = off
        self.nK = off - self.nu

        Apow = [np.eye(n)]
        for _ in range(N):
            Apow.append(p.A @ Apow[-1])
        self._Apow = Apow

        # Nominal prediction: xbar_k = Apow[k] x0 + sum_l Apow[k-1-l] B ubar_l.
        self._xbar_lin = []
        for k in range(N + 1):
            Mk = np.zeros((n, self.nu))
            for l in range(k):
                Mk[:, l * m:(l + 1) * m] = Apow[k - 1 - l] @ p.B
            self._xbar_lin.append(Mk)

        # Nominal cost: 1/2 z'Hz + (g0 + Gx x0)'z + x0-dependent constant.
        Hu = np.zeros((self.nu, self.nu))
        Gx = np.zeros((self.nu, n))
        for k in range(N + 1):
            Wk = p.P if k == N else p.Q
            Hu += 2.0 * self._xbar_lin[k].T @ Wk @ self._xbar_lin[k]
            Gx += 2.0 * self._xbar_lin[k].T @ Wk @ Apow[k]
        for k in range(N):
            Hu[k * m:(k + 1) * m, k * m:(k + 1) * m] += 2.0 * p.R
        self._Hu = Hu
        self._Gx = Gx

        rows = []
        mu = p.D_box.center
        radii = p.D_box.half_widths

        def dist_coeff(direction, k):
            """Disturbance coefficients c_j of a state row at step k.

            Returns [(j, const_part, k_linear_parts)] where k_linear_parts is
            a list of (gain_key, weight_vector_over_input_dim).
            """
            out = []
            for j in range(k):
                const = Apow[k - 1 - j].T @ direction
                lin = []
                for l in range(j + 1, k):
                    w = p.B.T @ Apow[k - 1 - l].T @ direction
                    if np.any(w != 0.0):
                        lin.append(((l, j), w))
                out.append((j, const, lin))
            return out

        def add_state_row(direction, offset, k, tag):
            row = _Row(self.n_base, n, tag)
            row.lin[:self.nu] = direction @ self._xbar_lin[k]
            row.rhs_x0 = Apow[k].T @ direction
            row.const_rhs = offset
            for j, const, lin in dist_coeff(direction, k):
                self._add_disturbance_terms(row, const, lin, mu, radii)
            rows.append(row)

        # Realized state constraints for k = 1..N-1 (k = 0 is checked at solve).
        for k in range(1, N):
            for a, b in zip(p.X.A, p.X.b):
                add_state_row(a, b, k, ("state", k))
        # Terminal constraint x_N in O.
        for a, b in zip(p.O.A, p.O.b):
            add_state_row(a, b, N, ("terminal", N))
        # Realized input constraints for k = 0..N-1.
        for k in range(N):
            for a, b in zip(p.U_eff.A, p.U_eff.b):
                row = _Row(self.n_base, n, ("input", k))
                row.lin[k * m:(k + 1) * m] = a
                row.const_rhs = b
                for j in range(k):
                    const = np.zeros(n)
                    lin = [((k, j), a.copy())]
                    self._add_disturbance_terms(row, const, lin, mu, radii)
                rows.append(row)

        self._assemble(rows)

    def _add_disturbance_terms(self, row, const, lin, mu, radii):
        """Fold worst-case contribution of one step's coefficient c into `row`.

        c is the n-vector with c[i] = const[i] + sum over (gain_key, w) of
        w . K_key[:, i]; the worst case over the box adds mu.c (affine, into
        the row) plus sum_i radii_i |c_i| (slack-lifted when K-dependent).
        """
        p = self.problem
        n, m = p.n, p.m
        # mu.c : constant part to LHS, K-linear part into row.lin.
        row.const_rhs -= float(mu @ const)
        for key, w in lin:
            base = self._gain_index(*key)
            for r in range(m):
                row.lin[base + r * n: base + (r + 1) * n] += w[r] * mu
        for i in range(n):
            if radii[i] == 0.0:
                continue
            expr_lin = np.zeros(self.n_base)
            for key, w in lin:
                base = self._gain_index(*key)
                for r in range(m):
                    expr_lin[base + r * n + i] += w[r]
            if np.any(expr_lin != 0.0):
                row.slack_terms.append((radii[i], expr_lin, float(const[i])))
            else:
                row.const_rhs -= radii[i] * abs(float(const[i]))

    def _assemble(self, rows):
        n_slack = sum(len(r.slack_terms) for r in rows)
        nz = self.n_base + n_slack
        n_rows = len(rows) + 2 * n_slack
        A_ineq = np.zeros((n_rows, nz))
        rhs_base = np.zeros(n_rows)
        rhs_x0 = np.zeros((n_rows, self.problem.n))
        si = self.n_base
        ri = 0
        self._primary_rows = []
        for row in rows:
            A_ineq[ri, :self.n_base] = row.lin
            rhs_base[ri] = row.const_rhs
            rhs_x0[ri] = row.rhs_x0
            self._primary_rows.append((ri, row.tag))
            for radius, expr_lin, expr_const in row.slack_terms:
                A_ineq[ri, si] = radius
                # expr - s <= 0 and -expr - s <= 0.
                A_ineq[len(rows) + 2 * (si - self.n_base), :self.n_base] = expr_lin
                A_ineq[len(rows) + 2 * (si - self.n_base), si] = -1.0
                rhs_base[len(rows) + 2 * (si - self.n_base)] = -expr_const
                A_ineq[len(rows) + 2 * (si - self.n_base) + 1, :self.n_base] = -expr_lin
                A_ineq[len(rows) + 2 * (si - self.n_base) + 1, si] = -1.0
                rhs_base[len(rows) + 2 * (si - self.n_base) + 1] = expr_const
                si += 1
            ri += 1
        self._A_ineq = A_ineq
        self._rhs_base = rhs_base
        self._rhs_x0 = rhs_x0
        self.n_slack = n_slack
        self.nz = nz
        H = np.zeros((nz, nz))
        H[:self.nu, :self.nu] = self._Hu
        idx = np.arange(self.nu, nz)
        H[idx, idx] = 2.0 * GAIN_REG
        self._H = H

    # -- solving -----------------------------------------------------------

    def qp_for(self, x0):
        x0 = np.asarray(x0, dtype=float)
        g = np.zeros(self.nz)
        g[:self.nu] = self._Gx @ x0
        b = self._rhs_base - self._rhs_x0 @ x0
        return QuadraticProgram(self._H, g, self._A_ineq, b)

    def solve(self, x0, feasibility_only=False) -> MPCSolution:
        p = self.problem
        x0 = np.asarray(x0, dtype=float)
        if self.empty_terminal:
            return MPCSolution(SolveKind.INFEASIBLE)
        if not geometry.contains_point(p.X, x0):
            return MPCSolution(SolveKind.INFEASIBLE)
        if feasibility_only:
            b = self._rhs_base - self._rhs_x0 @ x0
            status = optimization.solve_lp(np.zeros(self.nz), self._A_ineq, b)
            return MPCSolution(status.kind if status.kind == SolveKind.INFEASIBLE
                               else SolveKind.OPTIMAL)
        qp = self.qp_for(x0)
        status = optimization.solve_qp(qp)
        if not status.optimal:
            return MPCSolution(status.kind)
        z = status.primal
        ubar = z[:self.nu].reshape(p.N, p.m)
        gains = {
            key: z[off:off + p.m * p.n].reshape(p.m, p.n)
            for key, off in self._gain_offsets.items()
        }
        states = np.zeros((p.N + 1, p.n))
        states[0] = x0
        for k in range(p.N):
            states[k + 1] = p.A @ states[k] + p.B @ ubar[k]
        # Report the exact nominal cost (excludes the gain/slack regularizer).
        obj = 0.0
        for k in range(p.N + 1):
            Wk = p.P if k == p.N else p.Q
            obj += states[k] @ Wk @ states[k]
        for k in range(p.N):
            obj += ubar[k] @ p.R @ ubar[k]
        return MPCSolution(
            SolveKind.OPTIMAL,
            u0=ubar[0].copy(),
            nominal_states=states,
            nominal_inputs=ubar,
            gains=gains,
            objective=float(obj),
            kkt_residual=status.kkt_residual,
        )

    # -- verification helpers ---------------------------------------------

    def worst_case_lhs(self, x0, ubar, gains):
        """Compiled worst-case LHS minus RHS for every primary constraint row.

        Evaluates the slack expressions at their tight values |c|, so the
        result is independent of the QP's slack variables.
        """
        z = np.zeros(self.nz)
        z[:self.nu] = np.asarray(ubar, dtype=float).ravel()
        for key, off in self._gain_offsets.items():
            z[off:off + self.problem.m * self.problem.n] = np.asarray(
                gains[key], dtype=float).ravel()
        b = self._rhs_base - self._rhs_x0 @ np.asarray(x0, dtype=float)
        out = []
        si = self.n_base
        ri = 0
        n_primary = len(self._primary_rows)
        for row_idx, tag in self._primary_rows:
            lhs = float(self._A_ineq[row_idx, :self.n_base] @ z[:self.n_base])
            # Recover this row's slack columns and substitute |expr|.
            cols = np.nonzero(self._A_ineq[row_idx, self.n_base:])[0] + self.n_base
            for col in cols:
                radius = self._A_ineq[row_idx, col]
                # rhs_base of the "expr - s <= 0" row is -expr_const.
                expr_row = n_primary + 2 * (col - self.n_base)
                expr_val = float(self._A_ineq[expr_row, :self.n_base] @ z[:self.n_base]) \
                    - self._rhs_base[expr_row]
                lhs += radius * abs(expr_val)
            out.append((tag, lhs - b[row_idx]))
            ri += 1
        return out


def brute_force_worst_case(problem, x0, ubar, gains):
    """Worst-case constraint values by enumerating vertex disturbance sequences.

    Only meant for small instances (n * N <= ~8). Returns the same (tag,
    violation) list layout as CompiledMPC.worst_case_lhs.
    """
    p = problem
    n, m, N = p.n, p.m, p.N
    ubar = np.asarray(ubar, dtype=float).reshape(N, m)
    verts = p.D_box.vertices()
    if verts.shape[0] == 0:
        verts = np.zeros((1, n))
    from itertools import product

    worst = {}
    for seq in product(range(verts.shape[0]), repeat=N):
        d = verts[list(seq)]
        x = np.zeros((N + 1, n))
        u = np.zeros((N, m))
        x[0] = x0
        for k in range(N):
            u[k] = ubar[k] + sum(
                gains[(k, j)] @ d[j] for j in range(k) if (k, j) in gains
            )
            x[k + 1] = p.A @ x[k] + p.B @ u[k] + d[k]
        for k in range(1, N):
            for idx, (a, b) in enumerate(zip(p.X.A, p.X.b)):
                key = ("state", k, idx)
                worst[key] = max(worst.get(key, -np.inf), float(a @ x[k] - b))
        for idx, (a, b) in enumerate(zip(p.O.A, p.O.b)):
            key = ("terminal", N, idx)
            worst[key] = max(worst.get(key, -np.inf), float(a @ x[N] - b))
        for k in range(N):
            for idx, (a, b) in enumerate(zip(p.U_eff.A, p.U_eff.b)):
                key = ("input", k, idx)
                worst[key] = max(worst.get(key, -np.inf), float(a @ u[k] - b))
    return worst


def simulate_policy(problem, x0, solution, d_sequence):
    """Roll the affine policy forward under a given disturbance sequence."""
    p = problem
    x = np.zeros((p.N + 1, p.n))
    u = np.zeros((p.N, p.m))
    x[0] = np.asarray(x0, dtype=float)
    for k in range(p.N):
        u[k] = solution.nominal_inputs[k] + sum(
            solution.gains[(k, j)] @ d_sequence[j] for j in range(k)
            if (k, j) in solution.gains
        )
        x[k + 1] = p.A @ x[k] + p.B @ u[k] + d_sequence[k]
    return x, u


@dataclass
class TerminalIngredients:
    P: np.ndarray
    K: np.ndarray
    O: Polytope | None
    converged: bool


def terminal_ingredients(A, B, Q, R, D_box, X, U_eff) -> TerminalIngredients:
    """LQR terminal cost/gain plus the maximal RPI terminal set.

    An empty U_eff or an emptied RPI iteration yields O = None, which makes
    the MPC infeasible everywhere (the benchmark fragility mode).
    """
    K, P = optimization.dlqr(A, B, Q, R)
    if isinstance(U_eff, Polytope) and U_eff.is_empty():
        return TerminalIngredients(P, K, None, True)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    result = invariant.max_rpi(A - B @ K, D_box, X, U_eff, K)
    return TerminalIngredients(P, K, result.omega, result.converged)


class PrestabilizedTube:
    """Tube MPC with the loop prestabilized by the fixed terminal gain.

    The input is parameterized as u_k = -K_term x_k + c_k over the
    realized state, a causal special case of the affine-feedback class.
    All disturbance coefficients then become constants (powers of the
    closed-loop matrix), so the robustification folds into fixed
    right-hand-side tightenings and the QP carries only the N*m
    correction variables. More conservative than the full gain search,
    but orders of magnitude smaller for high state dimensions.
    """

    def __init__(self, problem: RobustMPCProblem):
        problem.validate()
        self.problem = problem
        self.empty_terminal = problem.O is None or (
            isinstance(problem.O, Polytope) and problem.O.is_empty()
        )
        if not self.empty_terminal:
            self._build()

    def _build(self):
        p = self.problem
        n, m, N = p.n, p.m, p.N
        K = p.K_term
        A_cl = p.A - p.B @ K
        pow_cl = [np.eye(n)]
        for _ in range(N):
            pow_cl.append(A_cl @ pow_cl[-1])
        self.nz = N * m

        # Nominal prediction xbar_k = pow_cl[k] x0 + M_k c.
        M = []
        for k in range(N + 1):
            Mk = np.zeros((n, self.nz))
            for l in range(k):
                Mk[:, l * m:(l + 1) * m] = pow_cl[k - 1 - l] @ p.B
            M.append(Mk)
        # Nominal input ubar_k = -K xbar_k + c_k = Uk_c c + Uk_x x0.
        U_c, U_x = [], []
        for k in range(N):
            sel = np.zeros((m, self.nz))
            sel[:, k * m:(k + 1) * m] = np.eye(m)
            U_c.append(sel - K @ M[k])
            U_x.append(-K @ pow_cl[k])

        H = np.zeros((self.nz, self.nz))
        Gx = np.zeros((self.nz, n))
        for k in range(N + 1):
            Wk = p.P if k == N else p.Q
            H += 2.0 * M[k].T @ Wk @ M[k]
            Gx += 2.0 * M[k].T @ Wk @ pow_cl[k]
        for k in range(N):
            H += 2.0 * U_c[k].T @ p.R @ U_c[k]
            Gx += 2.0 * U_c[k].T @ p.R @ U_x[k]

        rows_A, rhs_base, rhs_x0 = [], [], []

        def tighten(direction_seq):
            # Worst case of sum_j dir_j . d_j over the per-step box.
            return sum(geometry.support(p.D_box, dj) for dj in direction_seq)

        for k in range(1, N + 1):
            facets = p.O if k == N else p.X
            for a, b in zip(facets.A, facets.b):
                shrink = tighten(pow_cl[k - 1 - j].T @ a for j in range(k))
                rows_A.append(a @ M[k])
                rhs_base.append(b - shrink)
                rhs_x0.append(pow_cl[k].T @ a)
        for k in range(N):
            for a, b in zip(p.U_eff.A, p.U_eff.b):
                shrink = tighten(
                    -pow_cl[k - 1 - j].T @ K.T @ a for j in range(k)
                )
                rows_A.append(a @ U_c[k])
                rhs_base.append(b - shrink)
                rhs_x0.append(U_x[k].T @ a)

        self._H = H
        self._Gx = Gx
        self._A_ineq = np.array(rows_A)
        self._rhs_base = np.array(rhs_base)
        self._rhs_x0 = np.array(rhs_x0)
        self._M = M
        self._U_c, self._U_x = U_c, U_x
        self._pow_cl = pow_cl

    def solve(self, x0, feasibility_only=False) -> MPCSolution:
        p = self.problem
        x0 = np.asarray(x0, dtype=float)
        if self.empty_terminal:
            return MPCSolution(SolveKind.INFEASIBLE)
        if not geometry.contains_point(p.X, x0):
            return MPCSolution(SolveKind.INFEASIBLE)
        b = self._rhs_base - self._rhs_x0 @ x0
        if feasibility_only:
            status = optimization.solve_lp(np.zeros(self.nz), self._A_ineq, b)
            return MPCSolution(status.kind if status.kind == SolveKind.INFEASIBLE
                               else SolveKind.OPTIMAL)
        qp = QuadraticProgram(self._H, self._Gx @ x0, self._A_ineq, b)
        status = optimization.solve_qp(qp)
        if not status.optimal:
            return MPCSolution(status.kind)
        c = status.primal
        states = np.zeros((p.N + 1, p.n))
        inputs = np.zeros((p.N, p.m))
        states[0] = x0
        for k in range(p.N):
            inputs[k] = self._U_c[k] @ c + self._U_x[k] @ x0
            states[k + 1] = p.A @ states[k] + p.B @ inputs[k]
        obj = 0.0
        for k in range(p.N + 1):
            Wk = p.P if k == p.N else p.Q
            obj += states[k] @ Wk @ states[k]
        for k in range(p.N):
            obj += inputs[k] @ p.R @ inputs[k]
        return MPCSolution(
            SolveKind.OPTIMAL,
            u0=inputs[0].copy(),
            nominal_states=states,
            nominal_inputs=inputs,
            gains={},
            objective=float(obj),
            kkt_residual=status.kkt_residual,
        )


def compile(problem: RobustMPCProblem, x0) -> QuadraticProgram:
    """One-shot compilation to the robustified QP for a given initial state."""
    return CompiledMPC(problem).qp_for(x0)


def solve(problem: RobustMPCProblem, x0) -> MPCSolution:
    """One-shot compile-and-solve; prefer CompiledMPC for repeated solves."""
    return CompiledMPC(problem).solve(x0)


def dump_qp_json(compiled: CompiledMPC, x0, path):
    """Write the compiled QP matrices to JSON for external verification."""
    import json

    qp = compiled.qp_for(x0)
    payload = {
        "H": qp.H.tolist(),
        "g": qp.g.tolist(),
        "A_ineq": qp.A_ineq.tolist(),
        "b_ineq": qp.b_ineq.tolist(),
        "n_inputs": compiled.nu,
        "n_gains": compiled.nK,
        "n_slacks": compiled.n_slack,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def make_problem(A, B, N, Q, R, X, U_eff, D_box, ingredients=None):
    if ingredients is None:
        ingredients = terminal_ingredients(A, B, Q, R, D_box, X, U_eff)
    return RobustMPCProblem(
        A=A, B=B, N=N, Q=Q, R=R,
        P=ingredients.P, K_term=ingredients.K,
        X=X, U_eff=U_eff, D_box=D_box, O=ingredients.O,
    )
