"""Certainty-equivalent adaptive controllers and the tube MPC baselines.

Five closed-loop policies share one step interface
``(x, t, z) -> (u, diagnostics)`` plus an ``observe`` hook:

* AdaptiveCE_A / _B / _C -- tube MPC on the compound disturbance budget
  with the estimated term cancelled through the input; the variants
  differ only in when the budget pieces refresh (A: everything each
  step; B: disturbance budget each step, terminal set per episode;
  C: everything per episode).
* BenchmarkARMPC -- tube MPC that treats the whole unknown term as a
  disturbance (budget = estimated support (+) noise box), no
  cancellation, untightened inputs.
* NaiveTube -- tube MPC on the noise box alone, ignoring the unknown
  term entirely.

An MPC-infeasible step is an experiment observable: the controller
records it and applies a clipped LQR fallback so the run can continue.
A collapsed set-membership feasible set freezes the last published
model and voids the guarantees flag rather than crashing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import estimation, geometry, invariant, optimization, robust_mpc, uncertainty_sets
from .estimation import EmptyFeasibleSetError, LinearParamModel
from .geometry import Box, Polytope
from .optimization import SolveKind
from .uncertainty_sets import BudgetTracker, UncertaintyBudget

VARIANTS = ("AdaptiveCE_A", "AdaptiveCE_B", "AdaptiveCE_C", "BenchmarkARMPC", "NaiveTube")


@dataclass
class ControllerConfig:
    variant: str
    horizon: int
    delta: float = 0.05
    estimator: str = "blr"  # "blr" or "sm"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; one of {VARIANTS}")
        if self.estimator not in ("blr", "sm"):
            raise ValueError("estimator must be 'blr' or 'sm'")


def ce_policy(u0, f_hat, B_pinv):
    """Matching certainty-equivalent input: cancel the estimated term."""
    return np.atleast_1d(u0) - B_pinv @ np.atleast_1d(f_hat)


class _Estimator:
    """Uniform wrapper over the set-membership and BLR estimator states."""

    def __init__(self, state, V: Box | None = None):
        self.state = state
        self.V = V
        self.is_sm = isinstance(state, estimation.SetMembershipState)

    def update(self, phi, y):
        if self.is_sm:
            self.state.update(phi, y, self.V)
        else:
            self.state.update(phi, y)

    def model(self) -> LinearParamModel:
        return self.state.model()


class _TubeControllerBase:
    """Shared machinery: LQR terminal pair, budget-keyed MPC cache, fallback."""

    def __init__(self, A, B, N, Q, R, X: Polytope, U, V: Box, mpc_mode="affine",
                 terminal_r_scale=1.0):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.N = int(N)
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        self.X = X
        self.U_box = U if isinstance(U, Box) else None
        self.U = U.to_polytope() if isinstance(U, Box) else U
        self.V = uncertainty_sets.symmetrize_noise_box(V)
        if mpc_mode not in ("affine", "prestabilized"):
            raise ValueError("mpc_mode must be 'affine' or 'prestabilized'")
        self.mpc_mode = mpc_mode
        # The terminal gain may be detuned (larger input penalty) so that the
        # terminal invariant set stays large under tight input budgets; the
        # terminal cost then comes from the exact Lyapunov equation for the
        # true stage cost, which preserves the required cost decrease.
        if terminal_r_scale == 1.0:
            self.K_lqr, self.P = optimization.dlqr(self.A, self.B, self.Q, self.R)
        else:
            from scipy import linalg as sla

            self.K_lqr, _ = optimization.dlqr(
                self.A, self.B, self.Q, terminal_r_scale * self.R
            )
            A_cl = self.A - self.B @ self.K_lqr
            W = self.Q + self.K_lqr.T @ self.R @ self.K_lqr
            P = sla.solve_discrete_lyapunov(A_cl.T, W)
            self.P = 0.5 * (P + P.T)
        self._terminal_cache = {}
        self._compiled = None
        self._compiled_key = None
        self.infeasible_steps = 0

    # -- MPC assembly ------------------------------------------------------

    def _terminal_set(self, D_box: Box, U_eff: Polytope, cache_key):
        if cache_key in self._terminal_cache:
            return self._terminal_cache[cache_key]
        if U_eff.is_empty():
            omega = None
        else:
            result = invariant.max_rpi(
                self.A - self.B @ self.K_lqr, D_box, self.X, U_eff, self.K_lqr
            )
            omega = result.omega
        self._terminal_cache[cache_key] = omega
        return omega

    def _recompile(self, D_box: Box, U_eff: Polytope, omega, key):
        if key == self._compiled_key and self._compiled is not None:
            return
        problem = robust_mpc.RobustMPCProblem(
            A=self.A, B=self.B, N=self.N, Q=self.Q, R=self.R,
            P=self.P, K_term=self.K_lqr,
            X=self.X, U_eff=U_eff, D_box=D_box, O=omega,
        )
        cls = robust_mpc.PrestabilizedTube if self.mpc_mode == "prestabilized" \
            else robust_mpc.CompiledMPC
        self._compiled = cls(problem)
        self._compiled_key = key

    def _fallback_input(self, x, correction=None):
        """Clipped LQR input used when the MPC reports infeasible."""
        u = -self.K_lqr @ np.asarray(x, dtype=float)
        if correction is not None:
            u = u + correction
        if self.U_box is not None:
            return np.clip(u, self.U_box.lb, self.U_box.ub)
        # General polytope: Euclidean projection onto U.
        n = u.size
        qp = optimization.QuadraticProgram(np.eye(n), -u, self.U.A, self.U.b)
        status = optimization.solve_qp(qp)
        return status.primal if status.optimal else u

    def _solve_mpc(self, x):
        sol = self._compiled.solve(x)
        if not sol.optimal:
            self.infeasible_steps += 1
        return sol

    def start_episode(self):
        pass

    def observe(self, x, u, x_next, z=None):
        pass


class AdaptiveCEController(_TubeControllerBase):
    """Tube MPC on the post-cancellation budget with CE input correction."""

    def __init__(self, A, B, N, Q, R, X, U, V, estimator: _Estimator,
                 variant="AdaptiveCE_A", mpc_mode="affine", terminal_r_scale=1.0):
        super().__init__(A, B, N, Q, R, X, U, V, mpc_mode=mpc_mode,
                         terminal_r_scale=terminal_r_scale)
        if variant not in ("AdaptiveCE_A", "AdaptiveCE_B", "AdaptiveCE_C"):
            raise ValueError(f"not an adaptive CE variant: {variant!r}")
        self.variant = variant
        self.estimator = estimator
        self.tracker = BudgetTracker(self.B, self.V)
        self.published: LinearParamModel = estimator.model()
        self.guarantees_void = False
        self.budget: UncertaintyBudget | None = None
        self._episode_omega = None
        self._episode_omega_key = None
        self.start_episode()

    # -- refresh policies --------------------------------------------------

    def _refresh_budget(self):
        self.budget = self.tracker.refresh(self.published)

    def _u_eff(self):
        return uncertainty_sets.input_tightening(
            self.U, self.budget.B_pinv, self.budget.F_hat
        )

    def start_episode(self):
        """Episode boundary: publish the latest estimate, refresh everything."""
        if not self.guarantees_void:
            self.published = estimation.publish_gate(
                self.estimator.model(), self.published
            )
        self._refresh_budget()
        U_eff = self._u_eff()
        key = self.budget.key()
        omega = self._terminal_set(self.budget.D_hat, U_eff, key)
        self._episode_omega = omega
        self._episode_omega_key = key
        self._recompile(self.budget.D_hat, U_eff, omega, key)

    def _pre_step_refresh(self):
        if self.variant == "AdaptiveCE_C":
            return
        self._refresh_budget()
        key = self.budget.key()
        if key == self._compiled_key:
            return
        U_eff = self._u_eff()
        if self.variant == "AdaptiveCE_A":
            omega = self._terminal_set(self.budget.D_hat, U_eff, key)
        else:
            # Variant B: the episode-start terminal set stays valid because
            # the disturbance budget only shrinks and U_eff only grows.
            omega = self._episode_omega
        self._recompile(self.budget.D_hat, U_eff, omega, key)

    # -- uniform interface -------------------------------------------------

    def step(self, x, t, z=None):
        self._pre_step_refresh()
        x = np.asarray(x, dtype=float)
        f_hat = self.published.predict(x, z)
        correction = -self.budget.B_pinv @ f_hat
        sol = self._solve_mpc(x)
        if sol.optimal:
            u = ce_policy(sol.u0, f_hat, self.budget.B_pinv)
        else:
            u = self._fallback_input(x, correction)
        diag = {
            "status": sol.status.value,
            "feasible": sol.optimal,
            "objective": sol.objective,
            "u0": sol.u0,
            "f_hat": f_hat,
            "budget_key": self.budget.key(),
            "guarantees_void": self.guarantees_void,
        }
        return u, diag

    def observe(self, x, u, x_next, z=None):
        if self.guarantees_void:
            return
        y = estimation.residual(x_next, x, u, self.A, self.B)
        phi = self.published.feature_map(x, z)
        try:
            self.estimator.update(phi, y)
        except EmptyFeasibleSetError:
            # Misspecified model: freeze the last published estimate and
            # flag that the guarantees no longer hold.
            self.guarantees_void = True
            return
        if self.variant != "AdaptiveCE_C":
            self.published = estimation.publish_gate(
                self.estimator.model(), self.published
            )


class BenchmarkController(_TubeControllerBase):
    """Tube MPC on the naive budget F_hat (+) V; no cancellation."""

    def __init__(self, A, B, N, Q, R, X, U, V, estimator: _Estimator,
                 mpc_mode="affine", terminal_r_scale=1.0):
        super().__init__(A, B, N, Q, R, X, U, V, mpc_mode=mpc_mode,
                         terminal_r_scale=terminal_r_scale)
        self.estimator = estimator
        self.tracker = BudgetTracker(self.B, self.V)
        self.published: LinearParamModel = estimator.model()
        self.guarantees_void = False
        self.budget: UncertaintyBudget | None = None
        self.start_episode()

    def _refresh(self):
        self.budget = self.tracker.refresh(self.published)
        key = ("bench",) + self.budget.key()
        if key == self._compiled_key:
            return
        omega = self._terminal_set(self.budget.D_bench, self.U, key)
        self._recompile(self.budget.D_bench, self.U, omega, key)

    def start_episode(self):
        self._refresh()

    def step(self, x, t, z=None):
        self._refresh()
        x = np.asarray(x, dtype=float)
        sol = self._solve_mpc(x)
        u = sol.u0 if sol.optimal else self._fallback_input(x)
        diag = {
            "status": sol.status.value,
            "feasible": sol.optimal,
            "objective": sol.objective,
            "u0": sol.u0,
            "f_hat": np.zeros(self.A.shape[0]),
            "budget_key": self.budget.key(),
            "guarantees_void": self.guarantees_void,
        }
        return u, diag

    def observe(self, x, u, x_next, z=None):
        if self.guarantees_void:
            return
        y = estimation.residual(x_next, x, u, self.A, self.B)
        phi = self.published.feature_map(x, z)
        try:
            self.estimator.update(phi, y)
        except EmptyFeasibleSetError:
            self.guarantees_void = True
            return
        self.published = estimation.publish_gate(
            self.estimator.model(), self.published
        )


class NaiveTubeController(_TubeControllerBase):
    """Tube MPC on the noise box alone; the unknown term is ignored."""

    def __init__(self, A, B, N, Q, R, X, U, V, mpc_mode="affine",
                 terminal_r_scale=1.0):
        super().__init__(A, B, N, Q, R, X, U, V, mpc_mode=mpc_mode,
                         terminal_r_scale=terminal_r_scale)
        omega = self._terminal_set(self.V, self.U, "naive")
        self._recompile(self.V, self.U, omega, "naive")

    def step(self, x, t, z=None):
        x = np.asarray(x, dtype=float)
        sol = self._solve_mpc(x)
        u = sol.u0 if sol.optimal else self._fallback_input(x)
        diag = {
            "status": sol.status.value,
            "feasible": sol.optimal,
            "objective": sol.objective,
            "u0": sol.u0,
            "f_hat": np.zeros(self.A.shape[0]),
            "budget_key": None,
            "guarantees_void": False,
        }
        return u, diag


def make_controller(config: ControllerConfig, A, B, Q, R, X, U, V,
                    estimator: _Estimator | None = None, mpc_mode="affine",
                    terminal_r_scale=1.0):
    """Instantiate the configured variant with a shared constructor surface."""
    if config.variant == "NaiveTube":
        return NaiveTubeController(A, B, config.horizon, Q, R, X, U, V,
                                   mpc_mode=mpc_mode,
                                   terminal_r_scale=terminal_r_scale)
    if estimator is None:
        raise ValueError(f"variant {config.variant} requires an estimator")
    if config.variant == "BenchmarkARMPC":
        return BenchmarkController(A, B, config.horizon, Q, R, X, U, V, estimator,
                                   mpc_mode=mpc_mode,
                                   terminal_r_scale=terminal_r_scale)
    return AdaptiveCEController(
        A, B, config.horizon, Q, R, X, U, V, estimator, variant=config.variant,
        mpc_mode=mpc_mode, terminal_r_scale=terminal_r_scale,
    )
