"""Maximal robust positive invariant set computation."""

import numpy as np
import pytest

from armpc import geometry, invariant
from armpc.geometry import Box, Polytope


class TestMaxRPI:
    def test_scalar_oracle(self):
        # [DERIVED] x+ = 0.5 x + d, |d| <= 0.25, X = [-1, 1]: an interval
        # [-r, r] is invariant iff 0.5 r + 0.25 <= r, i.e. r >= 0.5, so X
        # itself is invariant and the *maximal* RPI equals X.
        res = invariant.max_rpi(
            np.array([[0.5]]), Box.centered([0.25]),
            Box.centered([1.0]).to_polytope(), None,
        )
        assert res.converged and not res.is_empty()
        lo = -geometry.support(res.omega, [-1.0])
        hi = geometry.support(res.omega, [1.0])
        assert lo == pytest.approx(-1.0, abs=1e-9)
        assert hi == pytest.approx(1.0, abs=1e-9)

    def test_scalar_shrinks_to_empty(self):
        # [DERIVED] a = 0.9, |d| <= 0.25: invariance needs r >= 2.5 > 1, so
        # no subset of X = [-1, 1] is invariant and the iteration empties.
        res = invariant.max_rpi(
            np.array([[0.9]]), Box.centered([0.25]),
            Box.centered([1.0]).to_polytope(), None,
        )
        assert res.is_empty()

    def test_zero_disturbance_no_erosion(self):
        # D = {0} with X already invariant: omega equals the seed set.
        A_cl = np.array([[0.5, 0.1], [0.0, 0.4]])
        X = Box.centered([1.0, 1.0]).to_polytope()
        res = invariant.max_rpi(A_cl, Box.centered([0.0, 0.0]), X, None)
        assert res.converged
        assert geometry.contains(res.omega, X) and geometry.contains(X, res.omega)

    def test_over_erosion_empty(self):
        res = invariant.max_rpi(
            np.array([[0.9]]), Box.centered([1.5]),
            Box.centered([1.0]).to_polytope(), None,
        )
        assert res.is_empty()

    def test_input_constraint_shrinks_seed(self):
        # With -Kx constrained to a tight input box, omega starts from
        # X intersect {|Kx| <= u_max}.
        A = np.array([[1.0, 0.2], [0.0, 1.0]])
        B = np.array([[0.0], [1.0]])
        from armpc.optimization import dlqr

        K, _ = dlqr(A, B, np.eye(2), [[1.0]])
        A_cl = A - B @ K
        X = Box.centered([4.0, 3.0]).to_polytope()
        U = Box.centered([0.5]).to_polytope()
        res = invariant.max_rpi(A_cl, Box.centered([0.0, 0.0]), X, U, K=K)
        assert res.converged and not res.is_empty()
        # Every vertex of omega must satisfy the input constraint.
        for v in res.omega.vertices():
            assert abs(float((K @ v)[0])) <= 0.5 + 1e-7

    def test_monotone_in_disturbance(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = rng.uniform(0.3, 0.9)
            d_small = rng.uniform(0.0, 0.2)
            d_large = d_small + rng.uniform(0.0, 0.3)
            X = Box.centered([1.0]).to_polytope()
            small = invariant.max_rpi(np.array([[a]]), Box.centered([d_small]),
                                      X, None)
            large = invariant.max_rpi(np.array([[a]]), Box.centered([d_large]),
                                      X, None)
            if large.is_empty():
                continue
            assert geometry.contains(small.omega, large.omega, tol=1e-7)


class TestIsRPI:
    def test_max_rpi_output_passes(self):
        A_cl = np.array([[0.7, 0.1], [0.0, 0.6]])
        D = Box.centered([0.05, 0.05])
        X = Box.centered([1.0, 1.0]).to_polytope()
        res = invariant.max_rpi(A_cl, D, X, None)
        assert res.converged
        assert invariant.is_rpi(res.omega, A_cl, D, X)

    def test_unstable_dynamics_rejected(self):
        A_cl = np.array([[1.5]])
        X = Box.centered([1.0]).to_polytope()
        assert not invariant.is_rpi(X, A_cl, Box.centered([0.0]), X)

    def test_origin_fixed_point(self):
        tiny = Box.centered([1e-9]).to_polytope()
        X = Box.centered([1.0]).to_polytope()
        assert invariant.is_rpi(tiny, np.array([[0.5]]), Box.centered([0.0]), X)
