"""H-representation polytope and axis-aligned box calculus.

All set arithmetic used by the budget construction, invariant-set
computation, and constraint tightening lives here. Boxes are kept as
(center, half_widths) pairs; polytopes as {x : Ax <= b}. Images of sets
under linear maps are tight axis-aligned box over-approximations
(interval arithmetic), which keeps every downstream robustification
linear and safe (supersets preserve the guarantees).
"""

from __future__ import annotations

import json
import numpy as np

# Absolute tolerance on facet residuals for membership / inclusion checks.
TOL = 1e-8


class EmptySetError(ValueError):
    """Raised when an operation requires a nonempty set."""


class Box:
    """Axis-aligned box {x : |x_i - center_i| <= half_widths_i}."""

    __slots__ = ("center", "half_widths", "_empty")

    def __init__(self, center, half_widths, empty=False):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.half_widths = np.atleast_1d(np.asarray(half_widths, dtype=float))
        if self.center.shape != self.half_widths.shape:
            raise ValueError("center and half_widths must have equal length")
        if not empty and np.any(self.half_widths < 0):
            raise ValueError("negative half-widths; use empty=True for the empty box")
        self._empty = bool(empty)

    @classmethod
    def from_bounds(cls, lb, ub):
        lb = np.atleast_1d(np.asarray(lb, dtype=float))
        ub = np.atleast_1d(np.asarray(ub, dtype=float))
        if np.any(ub < lb):
            return cls(np.zeros_like(lb), np.zeros_like(lb), empty=True)
        return cls((lb + ub) / 2.0, (ub - lb) / 2.0)

    @classmethod
    def centered(cls, half_widths):
        hw = np.atleast_1d(np.asarray(half_widths, dtype=float))
        return cls(np.zeros_like(hw), hw)

    @classmethod
    def empty(cls, dim):
        z = np.zeros(dim)
        return cls(z, z, empty=True)

    @property
    def dim(self):
        return self.center.size

    def is_empty(self):
        return self._empty

    @property
    def lb(self):
        return self.center - self.half_widths

    @property
    def ub(self):
        return self.center + self.half_widths

    def to_polytope(self):
        n = self.dim
        A = np.vstack([np.eye(n), -np.eye(n)])
        b = np.concatenate([self.ub, -self.lb])
        return Polytope(A, b)

    def sample(self, rng, size=None):
        if self._empty:
            raise EmptySetError("cannot sample from an empty box")
        shape = (size, self.dim) if size is not None else (self.dim,)
        return self.center + self.half_widths * rng.uniform(-1.0, 1.0, size=shape)

    def vertices(self):
        if self._empty:
            return np.empty((0, self.dim))
        n = self.dim
        signs = np.array(np.meshgrid(*([[-1.0, 1.0]] * n), indexing="ij"))
        signs = signs.reshape(n, -1).T
        return self.center + signs * self.half_widths

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        if self._empty or other._empty:
            return self._empty and other._empty
        return (np.allclose(self.center, other.center, atol=1e-12)
                and np.allclose(self.half_widths, other.half_widths, atol=1e-12))

    def __repr__(self):
        if self._empty:
            return f"Box.empty({self.dim})"
        return f"Box(center={self.center.tolist()}, half_widths={self.half_widths.tolist()})"

    def to_dict(self):
        d = {"center": self.center.tolist(), "half_widths": self.half_widths.tolist()}
        if self._empty:
            d["empty"] = True
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["half_widths"], empty=d.get("empty", False))

    def to_json(self):
        return json.dumps(self.to_dict())


class Polytope:
    """Convex polytope {x : Ax <= b} in H-representation.

    Rows with zero norm are rejected at construction. Emptiness is
    decided lazily through an LP feasibility check and cached.
    """

    __slots__ = ("A", "b", "_empty", "_verts", "_cheb")

    def __init__(self, A, b):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.atleast_1d(np.asarray(b, dtype=float))
        if self.A.shape[0] != self.b.size:
            raise ValueError("A and b row counts differ")
        if not np.all(np.isfinite(self.A)) or not np.all(np.isfinite(self.b)):
            raise ValueError("non-finite entries in H-representation")
        norms = np.linalg.norm(self.A, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("zero-norm facet rows are disallowed")
        self._empty = None
        self._verts = None
        self._cheb = None

    @property
    def dim(self):
        return self.A.shape[1]

    @property
    def n_rows(self):
        return self.A.shape[0]

    def is_empty(self):
        if self._empty is None:
            try:
                _, r = chebyshev_center(self, _check_empty=False)
                self._empty = r < -TOL
            except EmptySetError:
                self._empty = True
        return self._empty

    def dedupe_rows(self, decimals=12):
        """Drop exact duplicate rows (after normalizing each row)."""
        norms = np.linalg.norm(self.A, axis=1, keepdims=True)
        stacked = np.hstack([self.A / norms, self.b[:, None] / norms])
        _, idx = np.unique(np.round(stacked, decimals), axis=0, return_index=True)
        idx = np.sort(idx)
        return Polytope(self.A[idx], self.b[idx])

    def vertices(self):
        """Vertex enumeration; only supported for dim <= 2."""
        if self._verts is not None:
            return self._verts
        n = self.dim
        if n == 1:
            a = self.A[:, 0]
            ub = np.min(self.b[a > 0] / a[a > 0]) if np.any(a > 0) else np.inf
            lb = np.max(self.b[a < 0] / a[a < 0]) if np.any(a < 0) else -np.inf
            if not np.isfinite(lb) or not np.isfinite(ub):
                raise ValueError("unbounded 1-D polytope")
            verts = np.empty((0, 1)) if lb > ub + TOL else np.array([[lb], [ub]])
        elif n == 2:
            verts = _vertices_2d(self.A, self.b)
        else:
            raise NotImplementedError("vertex enumeration only implemented for dim <= 2")
        self._verts = verts
        return verts

    def __eq__(self, other):
        """Set equality via mutual inclusion (not row-wise identity)."""
        if not isinstance(other, Polytope):
            return NotImplemented
        return contains(self, other) and contains(other, self)

    def __repr__(self):
        return f"Polytope({self.n_rows} rows, dim {self.dim})"

    def to_dict(self):
        return {"A": self.A.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["A"], d["b"])

    def to_json(self):
        return json.dumps(self.to_dict())


def _vertices_2d(A, b):
    """All pairwise facet intersections that satisfy every constraint."""
    m = A.shape[0]
    ii, jj = np.triu_indices(m, k=1)
    a1, a2 = A[ii], A[jj]
    det = a1[:, 0] * a2[:, 1] - a1[:, 1] * a2[:, 0]
    ok = np.abs(det) > 1e-12
    a1, a2, b1, b2, det = a1[ok], a2[ok], b[ii][ok], b[jj][ok], det[ok]
    x = (b1 * a2[:, 1] - b2 * a1[:, 1]) / det
    y = (a1[:, 0] * b2 - a2[:, 0] * b1) / det
    pts = np.column_stack([x, y])
    # Keep intersection points feasible for all rows (scaled tolerance).
    norms = np.linalg.norm(A, axis=1)
    feas = np.all(pts @ A.T <= b + 1e-7 * np.maximum(norms, 1.0), axis=1)
    pts = pts[feas]
    if pts.shape[0] == 0:
        return np.empty((0, 2))
    # Dedupe and order by angle around the centroid.
    pts = np.unique(np.round(pts, 9), axis=0)
    c = pts.mean(axis=0)
    ang = np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0])
    return pts[np.argsort(ang)]


def _support_box(box, direction):
    return float(direction @ box.center + np.abs(direction) @ box.half_widths)


def support(P, direction):
    """max_{x in P} direction . x (closed form for boxes, LP otherwise)."""
    direction = np.asarray(direction, dtype=float)
    if isinstance(P, Box):
        if P.is_empty():
            raise EmptySetError("support of an empty box")
        return _support_box(P, direction)
    if P.dim <= 2:
        verts = P.vertices()
        if verts.shape[0] == 0:
            raise EmptySetError("support of an empty polytope")
        return float(np.max(verts @ direction))
    from . import optimization

    status = optimization.solve_lp(-direction, P.A, P.b)
    if status.kind == optimization.SolveKind.INFEASIBLE:
        raise EmptySetError("support of an empty polytope")
    if status.kind == optimization.SolveKind.UNBOUNDED:
        raise ValueError("polytope unbounded in the requested direction")
    return float(-status.objective)


def minkowski_sum(P, Q):
    """P (+) Q for Q a box; exact for box (+) box and polytope (+) box."""
    if not isinstance(Q, Box):
        raise TypeError("second operand must be a Box")
    if isinstance(P, Box):
        if P.dim != Q.dim:
            raise ValueError("dimension mismatch")
        if P.is_empty() or Q.is_empty():
            return Box.empty(P.dim)
        return Box(P.center + Q.center, P.half_widths + Q.half_widths)
    if P.dim != Q.dim:
        raise ValueError("dimension mismatch")
    offsets = P.A @ Q.center + np.abs(P.A) @ Q.half_widths
    return Polytope(P.A, P.b + offsets)


def pontryagin_diff(P, Q):
    """P (-) Q: shrink each facet offset by the support of Q. May be empty."""
    if isinstance(P, Box):
        P = P.to_polytope()
    if P.dim != Q.dim:
        raise ValueError("dimension mismatch")
    if isinstance(Q, Box):
        shrink = P.A @ Q.center + np.abs(P.A) @ Q.half_widths
    else:
        shrink = np.array([support(Q, a) for a in P.A])
    return Polytope(P.A, P.b - shrink)


def linear_map(M, P):
    """Tightest axis-aligned box containing M @ P for a box P.

    Over-approximates the true image (which is a zonotope) by interval
    arithmetic: hw_out = |M| hw_in.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not isinstance(P, Box):
        raise TypeError("linear_map is defined for boxes")
    if M.shape[1] != P.dim:
        raise ValueError("dimension mismatch")
    if P.is_empty():
        return Box.empty(M.shape[0])
    return Box(M @ P.center, np.abs(M) @ P.half_widths)


def chebyshev_center(P, _check_empty=True):
    """Center and radius of the largest inscribed Euclidean ball.

    Solves max r s.t. A_i c + r ||A_i|| <= b_i as an LP. Raises
    EmptySetError for empty polytopes.
    """
    from . import optimization

    if isinstance(P, Box):
        if P.is_empty():
            raise EmptySetError("Chebyshev center of an empty box")
        return P.center.copy(), float(np.min(P.half_widths))
    n = P.dim
    norms = np.linalg.norm(P.A, axis=1)
    A_lp = np.hstack([P.A, norms[:, None]])
    c = np.zeros(n + 1)
    c[-1] = -1.0
    # r is bounded below only through the facets; keep r free so that
    # infeasibility shows up as a negative optimal radius when possible.
    status = optimization.solve_lp(c, A_lp, P.b)
    if status.kind == optimization.SolveKind.UNBOUNDED:
        raise ValueError("Chebyshev center of an unbounded polytope")
    if status.kind != optimization.SolveKind.OPTIMAL:
        raise EmptySetError("empty polytope")
    center, radius = status.primal[:n], float(status.primal[-1])
    if _check_empty and radius < -TOL:
        raise EmptySetError("empty polytope")
    return center, radius


def contains_point(P, x, tol=TOL):
    x = np.asarray(x, dtype=float)
    if isinstance(P, Box):
        if P.is_empty():
            return False
        return bool(np.all(np.abs(x - P.center) <= P.half_widths + tol))
    return bool(np.all(P.A @ x <= P.b + tol))


def contains(P, Q, tol=TOL):
    """Set inclusion Q subseteq P via per-facet support functions."""
    if isinstance(Q, Box) and Q.is_empty():
        return True
    if isinstance(Q, Polytope) and Q.is_empty():
        return True
    if isinstance(P, Box) and P.is_empty():
        return False
    if isinstance(P, Box) and isinstance(Q, Box):
        return bool(np.all(Q.lb >= P.lb - tol) and np.all(Q.ub <= P.ub + tol))
    P_poly = P.to_polytope() if isinstance(P, Box) else P
    if isinstance(Q, Box):
        vals = P_poly.A @ Q.center + np.abs(P_poly.A) @ Q.half_widths
        return bool(np.all(vals <= P_poly.b + tol))
    try:
        return all(support(Q, a) <= bi + tol for a, bi in zip(P_poly.A, P_poly.b))
    except EmptySetError:
        return True
