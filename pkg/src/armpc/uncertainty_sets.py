"""Adaptive disturbance budgets built from the published estimator model.

The budget collects, as origin-symmetric boxes:

* F_hat  -- running intersection of the estimated support sets of the
            unknown term (contains both f(x) and every future estimate);
* D_err  -- estimation-error support (per-row confidence max-norms);
* D_hat  -- compound disturbance support after cancellation,
            (I - B B+) F_hat (+) B B+ D_err (+) V;
* D_bench -- the naive budget F_hat (+) V used by the benchmark
            controller that treats the whole term as a disturbance.

All four are nested over time because F_hat is a running componentwise
minimum and the published confidence bounds pass through the gate in
`estimation.publish_gate`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .geometry import Box, Polytope


def pseudo_inverse_projectors(B):
    """B+ = (B'B)^-1 B' and the range / complement projectors B B+, I - B B+."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    BtB = B.T @ B
    if np.linalg.matrix_rank(B) < B.shape[1]:
        raise ValueError("B must have full column rank")
    B_pinv = np.linalg.solve(BtB, B.T)
    proj_range = B @ B_pinv
    proj_perp = np.eye(B.shape[0]) - proj_range
    return B_pinv, proj_range, proj_perp


def symmetrize_noise_box(V: Box) -> Box:
    """Center the noise support at the origin, keeping the larger one-sided bound."""
    hw = np.maximum(np.abs(V.lb), np.abs(V.ub))
    return Box.centered(hw)


def support_box_F(model) -> Box:
    """Estimated support of the unknown term and of all future estimates.

    Half-width i = ||w_hat_i|| + 2 max ||w~_i|| over the row confidence set.
    """
    norms = np.linalg.norm(model.W_hat, axis=1)
    return Box.centered(norms + 2.0 * model.conf_max_norm)


def recursive_F_hat(prev: Box | None, F_now: Box) -> Box:
    """Running intersection of centered support boxes (componentwise min)."""
    if prev is None:
        return F_now
    return Box.centered(np.minimum(prev.half_widths, F_now.half_widths))


def error_box_D(model) -> Box:
    """Estimation-error support: half-widths are the published max-norm bounds."""
    return Box.centered(model.conf_max_norm.copy())


def compound_D_hat(F_hat: Box, D_err: Box, V: Box, proj_range, proj_perp) -> Box:
    """Tight box over-approximation of (I-BB+) F_hat (+) BB+ D (+) V."""
    return geometry.minkowski_sum(
        geometry.minkowski_sum(
            geometry.linear_map(proj_perp, F_hat),
            geometry.linear_map(proj_range, D_err),
        ),
        V,
    )


def benchmark_D_prime(F_hat: Box, V: Box) -> Box:
    """Naive budget F_hat (+) V for the benchmark tube controller."""
    return geometry.minkowski_sum(F_hat, V)


def input_tightening(U: Polytope, B_pinv, F_hat: Box) -> Polytope:
    """U (-) B+ F_hat; may come out empty (the MPC then reports infeasible)."""
    return geometry.pontryagin_diff(U, geometry.linear_map(B_pinv, F_hat))


@dataclass
class UncertaintyBudget:
    """Immutable snapshot of the adaptive sets at one refresh."""

    F_hat: Box
    D_err: Box
    D_hat: Box
    D_bench: Box
    V: Box
    B_pinv: np.ndarray
    proj_range: np.ndarray
    proj_perp: np.ndarray

    def key(self):
        """Hashable identity for cache lookups and variant-C snapshot checks."""
        return (
            self.F_hat.half_widths.tobytes(),
            self.D_err.half_widths.tobytes(),
            self.V.half_widths.tobytes(),
        )

    def to_dict(self):
        return {
            "F_hat": self.F_hat.to_dict(),
            "D_err": self.D_err.to_dict(),
            "D_hat": self.D_hat.to_dict(),
            "D_bench": self.D_bench.to_dict(),
        }


class BudgetTracker:
    """Produces nested budget snapshots from successive published models.

    Nesting of all four sets is asserted at every refresh; a violation
    here means the publication gate upstream is broken.
    """

    def __init__(self, B, V: Box, check_nesting=True):
        self.B_pinv, self.proj_range, self.proj_perp = pseudo_inverse_projectors(B)
        self.V = symmetrize_noise_box(V)
        self.check_nesting = check_nesting
        self.current: UncertaintyBudget | None = None

    def refresh(self, model) -> UncertaintyBudget:
        prev = self.current
        F_now = support_box_F(model)
        F_hat = recursive_F_hat(prev.F_hat if prev else None, F_now)
        D_err = error_box_D(model)
        budget = UncertaintyBudget(
            F_hat=F_hat,
            D_err=D_err,
            D_hat=compound_D_hat(F_hat, D_err, self.V, self.proj_range, self.proj_perp),
            D_bench=benchmark_D_prime(F_hat, self.V),
            V=self.V,
            B_pinv=self.B_pinv,
            proj_range=self.proj_range,
            proj_perp=self.proj_perp,
        )
        if prev is not None and self.check_nesting:
            for name in ("F_hat", "D_err", "D_hat", "D_bench"):
                new, old = getattr(budget, name), getattr(prev, name)
                if np.any(new.half_widths > old.half_widths + 1e-9):
                    raise AssertionError(f"budget nesting violated for {name}")
        self.current = budget
        return budget
