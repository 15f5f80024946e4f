"""Maximal robust positive invariant (RPI) set computation.

Fixed-point iteration Omega_{k+1} = Omega_k  ∩ Pre(Omega_k) with
Pre(Omega) = {x : A_cl x in Omega (-) D}, started from the state/input
constraint section Omega_0 = X ∩ {x : -Kx in U_tight}. The rows of
Omega_k are the base rows propagated through powers of A_cl with the
disturbance supports accumulated into the offsets, so convergence is
checked by testing only the newest candidate facets for redundancy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .geometry import Box, Polytope

# Fixed-point equality tolerance (mutual inclusion) and iteration cap.
FP_TOL = 1e-7
MAX_ITER = 200


@dataclass
class RPIResult:
    omega: Polytope | None  # None encodes the empty result
    converged: bool
    iterations: int

    def is_empty(self):
        return self.omega is None


def _support_rows(P, directions):
    return np.array([geometry.support(P, a) for a in directions])


def max_rpi(A_cl, D, X, U_tight, K=None, max_iter=MAX_ITER, tol=FP_TOL):
    """Maximal RPI set of x+ = A_cl x + d, d in D, inside X with -Kx in U_tight.

    Returns an RPIResult; `omega` is None when the iteration empties, and
    `converged` is False when the iteration cap is hit (the returned set is
    then an inner approximation, still safe by construction).
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    if np.max(np.abs(np.linalg.eigvals(A_cl))) >= 1.0:
        raise ValueError("A_cl must be strictly stable")

    rows_A = [X.A]
    rows_b = [X.b]
    if U_tight is not None:
        if U_tight.is_empty():
            return RPIResult(None, True, 0)
        if K is None:
            raise ValueError("K required when U_tight is given")
        K = np.atleast_2d(np.asarray(K, dtype=float))
        rows_A.append(-U_tight.A @ K)
        rows_b.append(U_tight.b)
    base = Polytope(np.vstack(rows_A), np.concatenate(rows_b)).dedupe_rows()
    # Rows of the input section can be zero when K has zero columns; drop them.
    keep = np.linalg.norm(base.A, axis=1) > 1e-12
    base = Polytope(base.A[keep], base.b[keep])
    if base.is_empty():
        return RPIResult(None, True, 0)

    omega = base
    # Candidate facets: base rows mapped through A_cl^t with accumulated
    # disturbance supports subtracted from the offsets.
    cand_A = base.A.copy()
    acc = np.zeros(base.n_rows)
    for it in range(1, max_iter + 1):
        # Pre maps row (a, b) to (a A_cl, b - h_D(a)).
        acc = acc + np.array([geometry.support(D, a) for a in cand_A])
        cand_A = cand_A @ A_cl
        cand_b = base.b - acc
        # Redundancy check: each candidate row against the current set.
        try:
            supports = _support_rows(omega, cand_A)
        except geometry.EmptySetError:
            return RPIResult(None, True, it)
        fresh = supports > cand_b + tol
        if not np.any(fresh):
            return RPIResult(omega, True, it)
        omega = Polytope(
            np.vstack([omega.A, cand_A[fresh]]),
            np.concatenate([omega.b, cand_b[fresh]]),
        ).dedupe_rows()
        if omega.is_empty():
            return RPIResult(None, True, it)
    return RPIResult(omega, False, max_iter)


def is_rpi(O, A_cl, D, X, U_tight=None, K=None, tol=FP_TOL):
    """Check A_cl O (+) D ⊆ O, O ⊆ X, and -K O ⊆ U_tight via supports."""
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    if O is None or (isinstance(O, Polytope) and O.is_empty()):
        raise ValueError("O must be nonempty")
    for a, b in zip(O.A, O.b):
        lhs = geometry.support(O, A_cl.T @ a) + geometry.support(D, a)
        if lhs > b + tol:
            return False
    if not geometry.contains(X, O, tol=tol):
        return False
    if U_tight is not None:
        K = np.atleast_2d(np.asarray(K, dtype=float))
        for a, b in zip(U_tight.A, U_tight.b):
            if geometry.support(O, -K.T @ a) > b + tol:
                return False
    return True
