"""Online estimators for the unknown weights of a feature-linear dynamics term.

Two estimators for W in x(t+1) = Ax + Bu + W phi(x) + v:

* set-membership: per-row feasible parameter polytopes refined by
  interval intersections, point estimate at the Chebyshev center, zero
  risk tolerance;
* recursive Bayesian linear regression (BLR): rank-one mean / inverse
  precision updates with time-uniform confidence ellipsoids.

Both export a per-row point estimate plus a per-row confidence set whose
max-norm element bounds the estimation error; a publication gate keeps
the published bounds non-increasing in time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry, optimization
from .geometry import Box, Polytope


class EmptyFeasibleSetError(RuntimeError):
    """The set-membership feasible set collapsed: the model is misspecified."""


# ---------------------------------------------------------------------------
# Feature maps
# ---------------------------------------------------------------------------


class FeatureMap:
    """Base class: phi(x[, z]) in R^d with ||phi|| <= 1 on the domain."""

    input_dim: int
    output_dim: int
    exogenous_dim: int = 0

    def __call__(self, x, z=None):
        raise NotImplementedError


class AnalyticFeatureMap(FeatureMap):
    """Named closure basis, optionally scaled to satisfy the unit norm bound."""

    def __init__(self, name, fn, input_dim, output_dim, exogenous_dim=0, scale=1.0):
        self.name = name
        self._fn = fn
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.exogenous_dim = exogenous_dim
        self.scale = float(scale)

    def __call__(self, x, z=None):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.exogenous_dim:
            out = self._fn(x, np.atleast_1d(np.asarray(z, dtype=float)))
        else:
            out = self._fn(x)
        return self.scale * np.atleast_1d(np.asarray(out, dtype=float))


class LoadedNetworkFeatureMap(FeatureMap):
    """Feedforward net with ReLU hidden layers and 1/sqrt(d)-scaled sigmoid outputs.

    Loaded from a JSON file holding layer weight matrices, biases, and
    activation tags. The output scaling is validated at load so the unit
    norm bound holds by construction.
    """

    def __init__(self, weights, biases, activations, output_scale):
        self.weights = [np.atleast_2d(np.asarray(w, dtype=float)) for w in weights]
        self.biases = [np.atleast_1d(np.asarray(b, dtype=float)) for b in biases]
        self.activations = list(activations)
        self.output_dim = self.weights[-1].shape[0]
        self.input_dim = self.weights[0].shape[1]
        expected = 1.0 / np.sqrt(self.output_dim)
        if abs(output_scale - expected) > 1e-12:
            raise ValueError(
                f"output_scale must be 1/sqrt(d) = {expected!r} for d = {self.output_dim}"
            )
        if self.activations[-1] != "sigmoid":
            raise ValueError("output activation must be sigmoid")
        if any(a != "relu" for a in self.activations[:-1]):
            raise ValueError("hidden activations must be relu")
        self.output_scale = float(output_scale)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            spec = json.load(fh)
        return cls(
            [layer["weight"] for layer in spec["layers"]],
            [layer["bias"] for layer in spec["layers"]],
            [layer["activation"] for layer in spec["layers"]],
            spec["output_scale"],
        )

    def save(self, path):
        spec = {
            "layers": [
                {"weight": w.tolist(), "bias": b.tolist(), "activation": a}
                for w, b, a in zip(self.weights, self.biases, self.activations)
            ],
            "output_scale": self.output_scale,
        }
        with open(path, "w") as fh:
            json.dump(spec, fh)

    def __call__(self, x, z=None):
        h = np.atleast_1d(np.asarray(x, dtype=float))
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = w @ h + b
            if act == "relu":
                h = np.maximum(h, 0.0)
            else:
                h = 1.0 / (1.0 + np.exp(-h))
        return self.output_scale * h


# ---------------------------------------------------------------------------
# Published model
# ---------------------------------------------------------------------------


@dataclass
class LinearParamModel:
    """A published estimate W_hat with per-row confidence max-norm bounds."""

    W_hat: np.ndarray            # (n, d)
    conf_max_norm: np.ndarray    # (n,), max ||w~|| over the row confidence set
    feature_map: FeatureMap

    def predict(self, x, z=None):
        return self.W_hat @ self.feature_map(x, z)

    @property
    def n(self):
        return self.W_hat.shape[0]

    @property
    def d(self):
        return self.W_hat.shape[1]


def residual(x_next, x, u, A, B):
    """Regression target y = x(t+1) - Ax(t) - Bu(t) = W phi(x) + v."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    return np.asarray(x_next, dtype=float) - A @ np.asarray(x, dtype=float) \
        - B @ np.atleast_1d(np.asarray(u, dtype=float))


def publish_gate(candidate: LinearParamModel, current: LinearParamModel | None):
    """Publish the candidate only if no row's confidence bound grew."""
    if current is None:
        return candidate
    if np.all(candidate.conf_max_norm <= current.conf_max_norm + 1e-12):
        return candidate
    return current


# ---------------------------------------------------------------------------
# Set-membership estimation
# ---------------------------------------------------------------------------


class SetMembershipState:
    """Per-row feasible parameter polytopes Theta_i in R^d.

    Updates are intersections only, so the sets are nested over time and
    the minimax (enclosing-ball) radii are non-increasing. Rows with
    identical normals are pruned (keeping the smallest offset) every
    `prune_every` updates.
    """

    def __init__(self, thetas, feature_map, prune_every=10):
        self.thetas = list(thetas)
        self.feature_map = feature_map
        self.prune_every = prune_every
        self._updates = 0

    @classmethod
    def from_box_prior(cls, W0, half_width, feature_map):
        """Theta_i(0) = {w : ||w - w0_i||_inf <= half_width}."""
        W0 = np.atleast_2d(np.asarray(W0, dtype=float))
        thetas = [
            Box(row, np.full(W0.shape[1], float(half_width))).to_polytope()
            for row in W0
        ]
        return cls(thetas, feature_map)

    @property
    def n(self):
        return len(self.thetas)

    def copy(self):
        new = SetMembershipState(list(self.thetas), self.feature_map, self.prune_every)
        new._updates = self._updates
        return new

    def update(self, phi, y, V: Box):
        """Intersect each Theta_i with {w : |y_i - w.phi| <= sigma_i}.

        sigma_i is the i-th half-width of the (origin-symmetric) noise box V.
        Raises EmptyFeasibleSetError when a row's feasible set collapses.
        """
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if np.linalg.norm(phi) == 0.0:
            return self
        new_thetas = []
        self._updates += 1
        prune = self._updates % self.prune_every == 0
        for i, theta in enumerate(self.thetas):
            sigma = V.half_widths[i]
            A = np.vstack([theta.A, phi[None, :], -phi[None, :]])
            b = np.concatenate([theta.b, [y[i] + sigma, sigma - y[i]]])
            theta_new = Polytope(A, b)
            if prune:
                theta_new = _prune_parallel_rows(theta_new)
            if theta_new.is_empty():
                raise EmptyFeasibleSetError(
                    f"feasible parameter set of row {i} collapsed to the null set"
                )
            new_thetas.append(theta_new)
        self.thetas = new_thetas
        return self

    def point_estimate(self):
        """Row-wise minimax centers and radii; risk tolerance is zero.

        The point estimate minimizes the worst-case distance to the
        feasible set (the minimum enclosing ball), so the radius always
        bounds the distance from the estimate to the true parameter and
        is non-increasing along nested updates.
        """
        centers, radii = [], []
        for theta in self.thetas:
            if theta.is_empty():
                raise EmptyFeasibleSetError("feasible parameter set is empty")
            c, r = _minimax_center(theta)
            centers.append(c)
            radii.append(max(r, 0.0))
        return np.vstack(centers), np.array(radii)

    def model(self):
        W_hat, radii = self.point_estimate()
        return LinearParamModel(W_hat, radii, self.feature_map)


def _minimax_center(theta: Polytope):
    """Center and radius of the minimum enclosing ball of a polytope.

    Exact via vertex enumeration in dimensions 1 and 2; in higher
    dimensions falls back to the inscribed-ball center with a bounding-box
    over-bound of the worst-case distance (still a valid error radius).
    """
    try:
        verts = theta.vertices()
    except NotImplementedError:
        c, _ = geometry.chebyshev_center(theta)
        eye = np.eye(theta.dim)
        ub = np.array([geometry.support(theta, e) for e in eye])
        lb = np.array([-geometry.support(theta, -e) for e in eye])
        return c, float(np.linalg.norm(np.maximum(ub - c, c - lb)))
    if verts.shape[0] == 0:
        raise EmptyFeasibleSetError("feasible parameter set is empty")
    return _min_ball_of_points(np.unique(np.round(verts, 12), axis=0))


def _min_ball_of_points(pts):
    """Minimum enclosing ball of a small point set by support enumeration.

    The optimal ball is determined by at most dim + 1 points, so checking
    every pair (diametral ball) and, in 2-D, every triple (circumcircle)
    is exact. Point counts here are polygon vertex counts, so the cubic
    enumeration is cheap.
    """
    m = pts.shape[0]
    if m == 1:
        return pts[0], 0.0
    tol = 1e-9
    best = None
    for i in range(m):
        for j in range(i + 1, m):
            c = 0.5 * (pts[i] + pts[j])
            r = 0.5 * np.linalg.norm(pts[i] - pts[j])
            if np.max(np.linalg.norm(pts - c, axis=1)) <= r + tol:
                if best is None or r < best[1]:
                    best = (c, r)
    if best is None and pts.shape[1] == 2:
        for i in range(m):
            for j in range(i + 1, m):
                for k in range(j + 1, m):
                    c = _circumcenter_2d(pts[i], pts[j], pts[k])
                    if c is None:
                        continue
                    r = np.max(np.linalg.norm(pts[[i, j, k]] - c, axis=1))
                    if np.max(np.linalg.norm(pts - c, axis=1)) <= r + tol:
                        if best is None or r < best[1]:
                            best = (c, r)
    if best is None:
        # Numerically degenerate input: fall back to the centroid bound.
        c = pts.mean(axis=0)
        return c, float(np.max(np.linalg.norm(pts - c, axis=1)))
    return best[0], float(best[1])


def _circumcenter_2d(p, q, s):
    """Circumcenter of three points in the plane; None when collinear."""
    M = 2.0 * np.array([q - p, s - p])
    rhs = np.array([q @ q - p @ p, s @ s - p @ p])
    if abs(np.linalg.det(M)) < 1e-12:
        return None
    return np.linalg.solve(M, rhs)


def _prune_parallel_rows(P):
    """Among rows with identical unit normals keep the tightest offset."""
    norms = np.linalg.norm(P.A, axis=1, keepdims=True)
    units = np.round(P.A / norms, 12)
    offsets = P.b / norms.ravel()
    _, inverse = np.unique(units, axis=0, return_inverse=True)
    keep = {}
    for row, group in enumerate(inverse):
        if group not in keep or offsets[row] < offsets[keep[group]]:
            keep[group] = row
    idx = np.sort(list(keep.values()))
    return Polytope(P.A[idx], P.b[idx])


def sm_update(state, phi, y, V):
    return state.copy().update(phi, y, V)


def sm_point_estimate(state):
    return state.point_estimate()


# ---------------------------------------------------------------------------
# Recursive Bayesian linear regression
# ---------------------------------------------------------------------------


class BLRState:
    """Per-row Gaussian posterior over the weights of W.

    Stores both the precision Lambda_i and its inverse so the rank-one
    recursion stays O(d^2) per update. `sigma` holds the per-row noise
    scales (sub-Gaussian variance proxies sigma_i^2), `delta` the total
    risk tolerance split evenly across rows.
    """

    def __init__(self, W0, Lambda0, sigma, delta, feature_map, chi2_dof=None):
        W0 = np.atleast_2d(np.asarray(W0, dtype=float))
        self.n, self.d = W0.shape
        self.means = [row.copy() for row in W0]
        Lambda0 = np.asarray(Lambda0, dtype=float)
        if Lambda0.ndim == 2:
            Lambda0 = np.repeat(Lambda0[None, :, :], self.n, axis=0)
        self.Lambda0 = [0.5 * (L + L.T) for L in Lambda0]
        self.Lambda_inv = [np.linalg.inv(L) for L in self.Lambda0]
        self.sigma = np.atleast_1d(np.asarray(sigma, dtype=float)) * np.ones(self.n)
        self.delta = float(delta)
        self.feature_map = feature_map
        # Theorem-style scaling needs the chi-square quantile; the ellipsoid
        # lives in R^d, so dof defaults to the feature dimension.
        self.chi2_dof = int(chi2_dof) if chi2_dof is not None else self.d
        self._logdet0 = [np.linalg.slogdet(L)[1] for L in self.Lambda0]
        self._lmax0 = [np.max(np.linalg.eigvalsh(L)) for L in self.Lambda0]
        self.t = 0

    @classmethod
    def from_warmup(cls, samples_phi, samples_y, sigma, delta, feature_map,
                    ridge=1e-8, chi2_dof=None):
        """Flat-prior (least squares) initialization from warm-up data."""
        Phi = np.atleast_2d(np.asarray(samples_phi, dtype=float))
        Y = np.atleast_2d(np.asarray(samples_y, dtype=float))
        d = Phi.shape[1]
        Lam = Phi.T @ Phi + ridge * np.eye(d)
        W0 = np.linalg.solve(Lam, Phi.T @ Y).T
        return cls(W0, Lam, sigma, delta, feature_map, chi2_dof=chi2_dof)

    @classmethod
    def load_prior(cls, path, feature_map):
        """Prior file: per-row means and precisions plus sigma_i and delta."""
        with open(path) as fh:
            spec = json.load(fh)
        return cls(
            np.asarray(spec["mean"], dtype=float),
            np.asarray(spec["precision"], dtype=float),
            np.asarray(spec["sigma"], dtype=float),
            spec["delta"],
            feature_map,
            chi2_dof=spec.get("chi2_dof"),
        )

    def copy(self):
        new = BLRState.__new__(BLRState)
        new.n, new.d = self.n, self.d
        new.means = [m.copy() for m in self.means]
        new.Lambda0 = self.Lambda0
        new.Lambda_inv = [L.copy() for L in self.Lambda_inv]
        new.sigma = self.sigma
        new.delta = self.delta
        new.feature_map = self.feature_map
        new.chi2_dof = self.chi2_dof
        new._logdet0 = self._logdet0
        new._lmax0 = self._lmax0
        new.t = self.t
        return new

    def update(self, phi, y):
        """Rank-one posterior update from one observation y = W phi + v."""
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if np.linalg.norm(phi) == 0.0:
            return self
        for i in range(self.n):
            Linv = self.Lambda_inv[i]
            Lphi = Linv @ phi
            denom = 1.0 + phi @ Lphi
            err = self.means[i] @ phi - y[i]
            self.means[i] = self.means[i] - (err / denom) * Lphi
            Linv = Linv - np.outer(Lphi, Lphi) / denom
            Linv = 0.5 * (Linv + Linv.T)
            cond = np.linalg.eigvalsh(Linv)
            if cond[0] <= 0.0 or cond[0] / cond[-1] < 1e-12:
                raise FloatingPointError("BLR inverse precision lost positive definiteness")
            self.Lambda_inv[i] = Linv
        self.t += 1
        return self

    def precision(self, i):
        return np.linalg.inv(self.Lambda_inv[i])

    def confidence_max_norm(self):
        """Per-row max-norm element of the time-uniform confidence ellipsoid.

        The ellipsoid is {w~ : (w~' Lambda_i w~)^(1/2) <= sigma_i beta_t},
        whose largest element has norm sigma_i beta_t / sqrt(lmin(Lambda_i)).
        """
        delta_row = self.delta / self.n
        chi2 = optimization.chi_square_quantile(self.chi2_dof, 1.0 - delta_row)
        out = np.empty(self.n)
        for i in range(self.n):
            eig = np.linalg.eigvalsh(self.Lambda_inv[i])
            lmin = 1.0 / eig[-1]   # smallest eigenvalue of Lambda_i
            logdet = -np.linalg.slogdet(self.Lambda_inv[i])[1]
            beta = np.sqrt(max(logdet - self._logdet0[i], 0.0)
                           + 2.0 * np.log(1.0 / delta_row)) \
                + np.sqrt(self._lmax0[i] / lmin * chi2)
            out[i] = self.sigma[i] * beta / np.sqrt(lmin)
        return out

    def model(self):
        return LinearParamModel(
            np.vstack(self.means), self.confidence_max_norm(), self.feature_map
        )


def blr_update(state, phi, y):
    return state.copy().update(phi, y)


def blr_confidence(state):
    return state.confidence_max_norm()
