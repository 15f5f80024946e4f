"""Ground-truth plants, noise models, episodic runner, and experiment metrics.

Plants realize x(t+1) = A x(t) + B u(t) + f(x(t)) + v(t) with an analytic
ground-truth term f and bounded noise. Three experiment families are
bundled: a double integrator with a matched or unmatched nonlinearity, a
planar quadrotor linearized about hover flying through a wind field, and
a cruise-control velocity tracker on inclined road segments.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import estimation, geometry
from .estimation import AnalyticFeatureMap
from .geometry import Box, Polytope

GRAVITY = 9.81


# ---------------------------------------------------------------------------
# Noise models
# ---------------------------------------------------------------------------


class NoiseModel:
    """Bounded noise source; `box` is the declared support V."""

    box: Box

    def sample(self, rng):
        raise NotImplementedError


class TruncatedGaussian(NoiseModel):
    """Isotropic N(0, sigma2) clipped at +-1.96 sigma per component."""

    def __init__(self, sigma2, dim, mask=None):
        self.sigma = float(np.sqrt(sigma2))
        self.dim = int(dim)
        self.mask = np.ones(dim) if mask is None else np.asarray(mask, dtype=float)
        self.box = Box.centered(1.96 * self.sigma * self.mask)

    def sample(self, rng):
        v = rng.normal(0.0, self.sigma, size=self.dim)
        return np.clip(v, -1.96 * self.sigma, 1.96 * self.sigma) * self.mask


class UniformBox(NoiseModel):
    def __init__(self, box: Box):
        self.box = box

    def sample(self, rng):
        return self.box.sample(rng)


class ZeroNoise(NoiseModel):
    def __init__(self, dim):
        self.box = Box.centered(np.zeros(dim))

    def sample(self, rng):
        return np.zeros(self.box.dim)


# ---------------------------------------------------------------------------
# Plants
# ---------------------------------------------------------------------------


@dataclass
class Plant:
    """True dynamics plus the experiment's constraint/cost constants."""

    name: str
    A: np.ndarray
    B: np.ndarray
    f_true: object               # callable (x, z) -> R^n
    noise: NoiseModel
    feature_map: object
    W_true: np.ndarray | None    # None when f is not in the feature span
    X: Polytope
    U: Box
    Q: np.ndarray
    R: np.ndarray
    N: int
    x0: np.ndarray
    exogenous: object = None     # callable t -> z, or None

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]


def step(plant: Plant, x, u, t, rng, z=None):
    """One exact plant transition with sampled noise."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if z is None and plant.exogenous is not None:
        z = plant.exogenous(t)
    return plant.A @ x + plant.B @ u + plant.f_true(x, z) + plant.noise.sample(rng)


def make_double_integrator(matched=True, w1=0.5, w2=0.5, sigma2=5e-3):
    """Double integrator with a matched tanh term or an unmatched pair."""
    A = np.array([[1.0, 0.2], [0.0, 1.0]])
    B = np.array([[0.0], [1.0]])
    X = Box.from_bounds([-4.0, -3.0], [4.0, 3.0]).to_polytope()
    U = Box.from_bounds([-2.0], [2.0])
    if matched:
        fmap = AnalyticFeatureMap(
            "tanh_x2", lambda x: np.array([np.tanh(x[1])]), 2, 1
        )
        W_true = np.array([[0.0], [w1]])
    else:
        fmap = AnalyticFeatureMap(
            "sin4x1_tanh_x2",
            lambda x: np.array([np.sin(4.0 * x[0]), np.tanh(x[1])]) / np.sqrt(2.0),
            2, 2,
        )
        W_true = np.array([[w1, 0.0], [0.0, w2]])

    def f_true(x, z=None):
        return W_true @ fmap(x)

    return Plant(
        name="double_integrator_matched" if matched else "double_integrator_unmatched",
        A=A, B=B, f_true=f_true,
        noise=TruncatedGaussian(sigma2, 2),
        feature_map=fmap, W_true=W_true,
        X=X, U=U, Q=np.eye(2), R=np.array([[1.0]]),
        N=3, x0=np.array([2.0, 2.0]),
    )


# Planar quadrotor constants (values the source experiments leave open).
QUAD_MASS = 1.0
QUAD_INERTIA = 0.01
QUAD_ARM = 0.2
QUAD_DT = 0.1
QUAD_VEL_BOUND = 10.0


QUAD_BANK_ANGLES = np.deg2rad([-22.5, 0.0, 22.5])


def _quad_ridge_bank():
    """Gaussian ridge features over (p_x, p_y), one per candidate wind axis.

    Each feature is exp(-(p_y cos a - p_x sin a)^2), the exact spatial
    profile of the squared wind speed, so any wind with a heading in the
    bank lies in the span with a single small weight.
    """
    angles = QUAD_BANK_ANGLES
    d = angles.size
    scale = 1.0 / np.sqrt(d)

    def fn(x):
        s = x[1] * np.cos(angles) - x[0] * np.sin(angles)
        return scale * np.exp(-s ** 2)

    return AnalyticFeatureMap("quad_ridge", fn, 6, d)


def quad_wind_force(x, V_w, theta_w):
    """Planar wind force in newtons at pose (p_x, p_y).

    Wind speed decays with the squared distance from the incidence axis:
    v_w = V_w exp(-(p_y cos - p_x sin)^2 / 2); force magnitude is
    c l v_w^2 with c = 0.5, l = 0.4. The heading theta_w is measured
    from the thrust axis, so theta_w = 0 is an updraft the thrusts can
    cancel exactly and larger headings add an unmatched lateral part.
    """
    s = x[1] * np.cos(theta_w) - x[0] * np.sin(theta_w)
    v_w = V_w * np.exp(-0.5 * s ** 2)
    mag = 0.5 * 0.4 * v_w ** 2
    return mag * np.array([np.sin(theta_w), np.cos(theta_w)])


def make_quadrotor(V_w=3.5, theta_w=0.0, sigma2=1e-4):
    """Planar quadrotor linearized about hover, Euler step dt = 0.1 s.

    State (p_x, p_y, theta, v_x, v_y, omega); input is the thrust
    deviation from hover, each component within +-mg/2 so the absolute
    thrusts stay in [0, mg]. The wind force enters the velocity rows.
    """
    m, I, l, dt = QUAD_MASS, QUAD_INERTIA, QUAD_ARM, QUAD_DT
    Ac = np.zeros((6, 6))
    Ac[0, 3] = Ac[1, 4] = Ac[2, 5] = 1.0
    Ac[3, 2] = -GRAVITY
    Bc = np.zeros((6, 2))
    Bc[4, 0] = Bc[4, 1] = 1.0 / m
    Bc[5, 0] = l / I
    Bc[5, 1] = -l / I
    A = np.eye(6) + dt * Ac
    B = dt * Bc

    def f_true(x, z=None):
        force = quad_wind_force(x, V_w, theta_w)
        out = np.zeros(6)
        out[3:5] = dt * force / m
        return out

    v = QUAD_VEL_BOUND
    # Flight corridor: wide along the route, tight across it. The narrow
    # p_y band is what the matched wind support must fit through.
    X = Box.from_bounds(
        [-2.0, -0.45, -0.5, -v, -v, -v], [2.0, 0.45, 0.5, v, v, v]
    ).to_polytope()
    # Thrust per rotor in [0, 1.5 mg]; inputs are deviations from hover mg/2.
    half = m * GRAVITY / 2.0
    U = Box.from_bounds([-half, -half], [2.0 * half, 2.0 * half])
    # Soft longitudinal weight keeps the LQR tilt response to lateral
    # disturbances inside the attitude bound.
    Q = np.diag([4.0, 10.0, 1.0, 1.0, 1.0, 0.1])
    R = 0.1 * np.eye(2)
    fmap = _quad_ridge_bank()
    # The wind field is exactly in the feature span when the heading is in
    # the bank; expose the true weights for the confidence-event checks.
    W_true = None
    match = np.isclose(QUAD_BANK_ANGLES, theta_w)
    if np.any(match):
        W_true = np.zeros((6, QUAD_BANK_ANGLES.size))
        col = int(np.argmax(match))
        coef = dt / m * 0.5 * 0.4 * V_w ** 2 * np.sqrt(QUAD_BANK_ANGLES.size)
        W_true[3, col] = coef * np.sin(theta_w)
        W_true[4, col] = coef * np.cos(theta_w)
    # Noise only excites the translational velocity rows (wind rows).
    mask = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 0.0])
    return Plant(
        name="quadrotor_wind",
        A=A, B=B, f_true=f_true,
        noise=TruncatedGaussian(sigma2, 6, mask=mask),
        feature_map=fmap, W_true=W_true,
        X=X, U=U, Q=Q, R=R,
        N=8, x0=np.array([-1.0, -0.3, 0.0, 0.0, 0.0, 0.0]),
    )


# Cruise-control constants.
CRUISE_MASS = 1e3
CRUISE_DRAG = 20.0
CRUISE_DT = 0.1
CRUISE_V_REF = 90.0 / 3.6
CRUISE_V0 = 85.0 / 3.6
CRUISE_SEGMENTS = [
    (50.0, 180.0, np.deg2rad(3.0)),
    (250.0, 380.0, np.deg2rad(-2.0)),
    (450.0, 580.0, np.deg2rad(4.0)),
]


def cruise_terrain_force(p):
    """Gravity component along the road from smoothed incline segments (N)."""
    total = 0.0
    for p1, p2, theta in CRUISE_SEGMENTS:
        total += np.sin(theta) * (np.tanh(p - p1) + np.tanh(p2 - p))
    return -(CRUISE_MASS * GRAVITY / 2.0) * total


def make_cruise(sigma2=1e-3):
    """Velocity-error tracking with terrain features over road position.

    The scalar state is v - v_ref; the road position is an exogenous
    signal advanced at the reference speed. The terrain features are
    per-segment tanh bumps scaled to unit norm.
    """
    m, k, dt = CRUISE_MASS, CRUISE_DRAG, CRUISE_DT
    K = len(CRUISE_SEGMENTS)
    A = np.array([[1.0 - dt * k / m]])
    B = np.array([[dt]])

    def phi(x, z):
        p = float(z[0])
        return np.array([
            (np.tanh(p - p1) + np.tanh(p2 - p)) / (2.0 * np.sqrt(K))
            for p1, p2, _ in CRUISE_SEGMENTS
        ])

    fmap = AnalyticFeatureMap("cruise_terrain", phi, 1, K, exogenous_dim=1)
    W_true = np.array([[
        dt * GRAVITY * np.sqrt(K) * np.sin(theta)
        for _, _, theta in CRUISE_SEGMENTS
    ]])

    def f_true(x, z):
        return np.array([-dt / m * cruise_terrain_force(float(z[0]))])

    def exogenous(t):
        return np.array([CRUISE_V_REF * dt * t])

    return Plant(
        name="cruise",
        A=A, B=B, f_true=f_true,
        noise=TruncatedGaussian(sigma2, 1),
        feature_map=fmap, W_true=W_true,
        X=Box.from_bounds([-5.0], [5.0]).to_polytope(),
        U=Box.from_bounds([-4.0], [4.0]),
        Q=np.array([[1.0]]), R=np.array([[1.0]]),
        N=5, x0=np.array([CRUISE_V0 - CRUISE_V_REF]),
        exogenous=exogenous,
    )


# ---------------------------------------------------------------------------
# Warm-up data and estimator construction
# ---------------------------------------------------------------------------


def warmup_samples(plant: Plant, k, rng, state_box: Box | None = None):
    """k transitions at uniformly sampled states/inputs: (phi, residual) pairs."""
    if state_box is None:
        # Bounding box of X (the experiment X sets are boxes by construction).
        lb = np.array([-geometry.support(plant.X, -e)
                       for e in np.eye(plant.n)])
        ub = np.array([geometry.support(plant.X, e) for e in np.eye(plant.n)])
        state_box = Box.from_bounds(lb, ub)
    phis, ys = [], []
    for j in range(k):
        x = state_box.sample(rng)
        u = plant.U.sample(rng)
        z = plant.exogenous(j) if plant.exogenous is not None else None
        x_next = step(plant, x, u, j, rng, z)
        phis.append(plant.feature_map(x, z))
        ys.append(estimation.residual(x_next, x, u, plant.A, plant.B))
    return np.array(phis), np.array(ys)


def make_blr_estimator(plant: Plant, k_warmup, rng, delta=0.05, sigma=None,
                       prior_precision=None):
    """BLR estimator initialized from a warm-up batch.

    With `prior_precision` set, the warm-up data enters through the
    recursive update against an isotropic prior (keeps the confidence
    scaling well conditioned); otherwise the batch least-squares Gram
    matrix is used as the prior directly.
    """
    from .controller import _Estimator

    Phi, Y = warmup_samples(plant, k_warmup, rng)
    if sigma is None:
        if hasattr(plant.noise, "sigma"):
            sigma = plant.noise.sigma * getattr(plant.noise, "mask", 1.0)
        else:
            sigma = np.max(plant.noise.box.half_widths)
    if prior_precision is None:
        state = estimation.BLRState.from_warmup(
            Phi, Y, sigma, delta, plant.feature_map
        )
    else:
        d = plant.feature_map.output_dim
        state = estimation.BLRState(
            np.zeros((plant.n, d)), prior_precision * np.eye(d),
            sigma, delta, plant.feature_map,
        )
        for phi, y in zip(Phi, Y):
            state.update(phi, y)
    return _Estimator(state)


def make_sm_estimator(plant: Plant, prior_half_width, rng=None, k_warmup=0):
    """Set-membership estimator from a box prior, optionally warm-started."""
    from .controller import _Estimator

    n, d = plant.n, plant.feature_map.output_dim
    state = estimation.SetMembershipState.from_box_prior(
        np.zeros((n, d)), prior_half_width, plant.feature_map
    )
    est = _Estimator(state, V=plant.noise.box)
    if k_warmup and rng is not None:
        Phi, Y = warmup_samples(plant, k_warmup, rng)
        for phi, y in zip(Phi, Y):
            state.update(phi, y, plant.noise.box)
    return est


# ---------------------------------------------------------------------------
# Run logs
# ---------------------------------------------------------------------------

RUNLOG_SCHEMA = "armpc-runlog-v1"


class RunLog:
    """Append-only per-step records plus derived per-run metrics."""

    def __init__(self, config=None, seed=None):
        self.config = config or {}
        self.seed = seed
        self.steps = []
        self.metrics = {}
        self.budget_snapshots = {}

    def append(self, record):
        self.steps.append(record)

    def finalize(self, plant: Plant, controller=None):
        """Compute closed-loop cost, violation and feasibility summaries."""
        cost = 0.0
        violations = 0
        infeasible_step = None
        sq_accel = 0.0
        conf_event = True
        prev_x = None
        for rec in self.steps:
            x, u = rec["x"], rec["u"]
            cost += float(x @ plant.Q @ x + u @ plant.R @ u)
            if not geometry.contains_point(plant.X, x, tol=1e-7) or \
                    not geometry.contains_point(plant.U, u, tol=1e-7):
                violations += 1
                rec["violation"] = True
            if not rec["feasible"] and infeasible_step is None:
                infeasible_step = rec["t"]
            if prev_x is not None:
                dv = (x - prev_x) / CRUISE_DT
                sq_accel += float(dv @ dv)
            prev_x = x
            conf_event = conf_event and rec.get("conf_event", True)
        self.metrics = {
            "cost": cost,
            "violations": violations,
            "infeasible_step": infeasible_step,
            "sum_sq_accel": sq_accel,
            "confidence_event": conf_event,
            "steps": len(self.steps),
        }
        if controller is not None:
            self.metrics["guarantees_void"] = getattr(
                controller, "guarantees_void", False
            )
        return self.metrics

    # -- serialization -----------------------------------------------------

    def _csv_rows(self):
        header = ["t", "status", "feasible", "objective", "violation",
                  "conf_event", "budget_id"]
        vec_cols = ["x", "u", "u0", "f_hat", "d"]
        widths = {}
        for c in vec_cols:
            arr = self.steps[0].get(c) if self.steps else None
            widths[c] = 0 if arr is None else np.atleast_1d(arr).size
            header += [f"{c}{i}" for i in range(widths[c])]
        rows = [header]
        for rec in self.steps:
            row = [rec["t"], rec["status"], int(rec["feasible"]),
                   rec.get("objective", ""), int(rec.get("violation", False)),
                   int(rec.get("conf_event", True)), rec.get("budget_id", "")]
            for c in vec_cols:
                arr = rec.get(c)
                vals = np.atleast_1d(arr) if arr is not None else []
                row += [f"{v:.12g}" for v in vals]
                row += [""] * (widths[c] - len(vals))
            rows.append(row)
        return rows

    def to_csv(self, path):
        rows = self._csv_rows()
        with open(path, "w") as fh:
            fh.write(f"# schema={RUNLOG_SCHEMA}\n")
            for row in rows:
                fh.write(",".join(str(v) for v in row) + "\n")

    def to_json(self, path):
        payload = {
            "schema": RUNLOG_SCHEMA,
            "seed": self.seed,
            "config": self.config,
            "metrics": self.metrics,
            "budgets": self.budget_snapshots,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, default=_json_default)

    def digest(self):
        """Deterministic content hash (replay check)."""
        h = hashlib.sha256()
        for row in self._csv_rows():
            h.update(",".join(str(v) for v in row).encode())
        return h.hexdigest()


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


# ---------------------------------------------------------------------------
# Episodic runner
# ---------------------------------------------------------------------------


def run_episode(plant: Plant, controller, T, seed, config=None,
                new_episode=False) -> RunLog:
    """T closed-loop steps from plant.x0; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    log = RunLog(config=config, seed=seed)
    if new_episode:
        controller.start_episode()
    x = plant.x0.copy()
    budget_ids = {}
    for t in range(T):
        z = plant.exogenous(t) if plant.exogenous is not None else None
        u, diag = controller.step(x, t, z)
        x_next = step(plant, x, u, t, rng, z)
        controller.observe(x, u, x_next, z)
        d = None
        if diag.get("u0") is not None:
            d = x_next - plant.A @ x - plant.B @ np.atleast_1d(diag["u0"])
        key = diag.get("budget_key")
        if key is not None and key not in budget_ids:
            budget_ids[key] = len(budget_ids)
            budget = getattr(controller, "budget", None)
            if budget is not None:
                self_id = budget_ids[key]
                log.budget_snapshots[self_id] = budget.to_dict()
        rec = {
            "t": t, "x": x.copy(), "u": np.atleast_1d(u).copy(),
            "u0": diag.get("u0"), "f_hat": diag.get("f_hat"), "d": d,
            "status": diag["status"], "feasible": diag["feasible"],
            "objective": diag.get("objective"),
            "budget_id": budget_ids.get(key, ""),
        }
        published = getattr(controller, "published", None)
        if plant.W_true is not None and published is not None:
            err = np.linalg.norm(plant.W_true - published.W_hat, axis=1)
            rec["conf_event"] = bool(np.all(err <= published.conf_max_norm + 1e-12))
        log.append(rec)
        x = x_next
    log.finalize(plant, controller)
    return log


def run_campaign(run_fns, jobs=1):
    """Run a list of zero-argument run callables, optionally in parallel."""
    if jobs <= 1:
        return [fn() for fn in run_fns]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda fn: fn(), run_fns))


# ---------------------------------------------------------------------------
# Feasible envelope
# ---------------------------------------------------------------------------


def feasible_envelope(compiled, X: Polytope, resolution=41):
    """Fraction of X covered by the hull of MPC-feasible grid points.

    Grids the bounding box of the 2-D constraint set, marks initial
    conditions where the robust MPC is feasible, and returns the ratio of
    the convex-hull area of the feasible points to the area of X.
    """
    if X.dim != 2:
        raise ValueError("the envelope metric is defined for 2-D state spaces")
    lb = np.array([-geometry.support(X, -e) for e in np.eye(2)])
    ub = np.array([geometry.support(X, e) for e in np.eye(2)])
    xs = np.linspace(lb[0], ub[0], resolution)
    ys = np.linspace(lb[1], ub[1], resolution)
    pts = []
    for a in xs:
        for b in ys:
            x0 = np.array([a, b])
            if not geometry.contains_point(X, x0):
                continue
            if compiled.solve(x0, feasibility_only=True).optimal:
                pts.append(x0)
    if len(pts) < 3:
        return 0.0
    pts = np.array(pts)
    hull = _hull_area(pts)
    x_area = _hull_area(X.vertices())
    return float(hull / x_area)


def _hull_area(pts):
    """Convex hull area of 2-D points via the shoelace formula."""
    from scipy.spatial import ConvexHull

    if pts.shape[0] < 3:
        return 0.0
    try:
        hull = ConvexHull(pts)
    except Exception:
        return 0.0
    verts = pts[hull.vertices]
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
