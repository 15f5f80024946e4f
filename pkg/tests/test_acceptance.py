"""End-to-end acceptance studies for the adaptive robust MPC stack.

Each test prints exactly one summary line of the form

    criterion NN <name>: PASS|FAIL (details)

computed before the assertions, so the verdict is visible even on red.
The studies are desk-scale versions of the library's three experiment
families plus direct oracle checks of the estimator and QP machinery.
"""

import time

import numpy as np
import pytest

from armpc import geometry, simulation
from armpc.controller import (
    AdaptiveCEController,
    BenchmarkController,
    ControllerConfig,
    NaiveTubeController,
    make_controller,
)
from armpc.estimation import (
    AnalyticFeatureMap,
    BLRState,
    EmptyFeasibleSetError,
    LinearParamModel,
    SetMembershipState,
)
from armpc.geometry import Box
from armpc.robust_mpc import CompiledMPC, brute_force_worst_case, make_problem
from armpc.simulation import (
    feasible_envelope,
    make_blr_estimator,
    make_cruise,
    make_double_integrator,
    make_quadrotor,
    run_campaign,
    run_episode,
)

MARGIN_TERMINAL_SCALE = 5.0   # detuned terminal gain for the margin studies
ISS_GAIN_LOCKED = 1.07        # long-run ||x|| / disturbance-radius, recorded once


def _verdict(num, name, ok, detail):
    print(f"criterion {num:02d} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


# ---------------------------------------------------------------------------
# Shared 100-seed matched double-integrator campaign (criteria 1-3)
# ---------------------------------------------------------------------------


class _InstrumentedController:
    """Delegating wrapper that records the terminal set per budget refresh."""

    def __init__(self, inner):
        self._inner = inner
        self.omegas = []

    def step(self, x, t, z=None):
        u, diag = self._inner.step(x, t, z)
        key = diag["budget_key"]
        if not self.omegas or self.omegas[-1][0] != key:
            self.omegas.append((key, self._inner._compiled.problem.O))
        return u, diag

    def observe(self, *args, **kwargs):
        return self._inner.observe(*args, **kwargs)

    def start_episode(self):
        return self._inner.start_episode()

    def __getattr__(self, name):
        return getattr(self._inner, name)


@pytest.fixture(scope="module")
def matched_campaign():
    def run_one(seed):
        plant = make_double_integrator(matched=True, w1=0.5)
        est = make_blr_estimator(plant, 1000,
                                 np.random.default_rng(90_000 + seed))
        cfg = ControllerConfig(variant="AdaptiveCE_A", horizon=plant.N)
        ctrl = make_controller(cfg, plant.A, plant.B, plant.Q, plant.R,
                               plant.X, plant.U, plant.noise.box,
                               estimator=est)
        wrapped = _InstrumentedController(ctrl)
        log = run_episode(plant, wrapped, 50, seed)
        return log, wrapped.omegas

    t0 = time.time()
    results = run_campaign([lambda s=s: run_one(s) for s in range(100)],
                           jobs=4)
    return results, time.time() - t0


def test_criterion_01_recursive_feasibility_and_safety(matched_campaign):
    results, elapsed = matched_campaign
    logs = [log for log, _ in results]
    events = sum(bool(log.metrics["confidence_event"]) for log in logs)
    event_logs = [log for log in logs if log.metrics["confidence_event"]]
    violations = sum(log.metrics["violations"] for log in event_logs)
    infeasible = sum(log.metrics["infeasible_step"] is not None
                     for log in event_logs)
    ok = events >= 95 and violations == 0 and infeasible == 0 \
        and elapsed <= 300.0
    _verdict(1, "recursive feasibility and safety", ok,
             f"confidence event {events}/100, violations {violations}, "
             f"infeasible runs {infeasible}, {elapsed:.0f}s")
    assert events >= 95
    assert violations == 0
    assert infeasible == 0
    assert elapsed <= 300.0


def test_criterion_02_set_nesting(matched_campaign):
    results, _ = matched_campaign
    box_bad = omega_bad = 0
    names = ("F_hat", "D_err", "D_hat")
    for log, omegas in results:
        snaps = [log.budget_snapshots[i]
                 for i in sorted(log.budget_snapshots)]
        for prev, cur in zip(snaps, snaps[1:]):
            for name in names:
                outer = Box.from_dict(prev[name])
                inner = Box.from_dict(cur[name])
                if not geometry.contains(outer, inner, tol=1e-7):
                    box_bad += 1
        for (_, o_prev), (_, o_cur) in zip(omegas, omegas[1:]):
            if o_prev is None or o_cur is None or \
                    not geometry.contains(o_cur, o_prev, tol=1e-7):
                omega_bad += 1
    refreshes = sum(len(om) for _, om in results)
    ok = box_bad == 0 and omega_bad == 0
    _verdict(2, "budget and terminal-set nesting", ok,
             f"{refreshes} refreshes, box violations {box_bad}, "
             f"terminal-set violations {omega_bad}")
    assert box_bad == 0
    assert omega_bad == 0


def test_criterion_03_compound_disturbance_containment(matched_campaign):
    results, _ = matched_campaign
    checked = outside = 0
    for log, _ in results:
        if not log.metrics["confidence_event"]:
            continue
        for rec in log.steps:
            if rec["d"] is None:
                continue
            D_hat = Box.from_dict(
                log.budget_snapshots[rec["budget_id"]]["D_hat"])
            checked += 1
            if np.any(np.abs(rec["d"] - D_hat.center)
                      > D_hat.half_widths + 1e-9):
                outside += 1
    ok = checked > 0 and outside == 0
    _verdict(3, "compound disturbance containment", ok,
             f"{checked} steps checked, {outside} outside the budget")
    assert checked > 0
    assert outside == 0


# ---------------------------------------------------------------------------
# Margin and envelope studies (criteria 4-5)
# ---------------------------------------------------------------------------


def _feasible_at_start(w1, variant, matched=True, w2=0.5):
    plant = make_double_integrator(matched=matched, w1=w1, w2=w2)
    est = make_blr_estimator(plant, 1000, np.random.default_rng(8))
    cfg = ControllerConfig(variant=variant, horizon=plant.N)
    ctrl = make_controller(cfg, plant.A, plant.B, plant.Q, plant.R,
                           plant.X, plant.U, plant.noise.box, estimator=est,
                           terminal_r_scale=MARGIN_TERMINAL_SCALE)
    ctrl.start_episode()
    _, diag = ctrl.step(plant.x0, 0)
    return diag["feasible"]


def test_criterion_04_feasibility_margin_ratio():
    t0 = time.time()
    grid = np.arange(0.05, 2.01, 0.05)
    limits = {}
    for variant in ("AdaptiveCE_C", "BenchmarkARMPC"):
        limit = 0.0
        for w1 in grid:
            if not _feasible_at_start(float(w1), variant):
                break
            limit = float(w1)
        limits[variant] = limit
    elapsed = time.time() - t0
    ratio = (limits["AdaptiveCE_C"] / limits["BenchmarkARMPC"]
             if limits["BenchmarkARMPC"] > 0 else np.inf)
    ok = ratio >= 1.8 and elapsed <= 600.0
    _verdict(4, "feasibility margin ratio", ok,
             f"cancellation limit w1={limits['AdaptiveCE_C']:.2f}, "
             f"benchmark limit w1={limits['BenchmarkARMPC']:.2f}, "
             f"ratio {ratio:.2f}, {elapsed:.0f}s")
    assert ratio >= 1.8
    assert elapsed <= 600.0


def _envelope_pair(plant):
    est = make_blr_estimator(plant, 1000, np.random.default_rng(8))
    out = {}
    for variant in ("AdaptiveCE_C", "BenchmarkARMPC"):
        cfg = ControllerConfig(variant=variant, horizon=plant.N)
        ctrl = make_controller(cfg, plant.A, plant.B, plant.Q, plant.R,
                               plant.X, plant.U, plant.noise.box,
                               estimator=est,
                               terminal_r_scale=MARGIN_TERMINAL_SCALE)
        ctrl.start_episode()
        compiled = ctrl._compiled
        if compiled is None:
            out[variant] = (0.0, True)
        else:
            empty = (compiled.problem.O is None
                     or compiled.problem.O.is_empty())
            out[variant] = (feasible_envelope(compiled, plant.X,
                                              resolution=41), empty)
    return out["AdaptiveCE_C"], out["BenchmarkARMPC"]


def test_criterion_05_envelope_dominance():
    failures = []
    points = []
    for matched in (True, False):
        for w1 in (0.1, 0.3, 0.5, 0.7, 0.9, 1.1):
            plant = make_double_integrator(matched=matched, w1=w1, w2=0.5)
            (ce, _), (bn, bn_empty) = _envelope_pair(plant)
            points.append((matched, w1, ce, bn))
            if ce < bn - 1e-12 or (bn == 0.0) != bn_empty:
                failures.append((matched, w1, ce, bn, bn_empty))
    ok = not failures
    nondeg = sum(p[2] > 0 for p in points)
    _verdict(5, "feasible envelope dominance", ok,
             f"{len(points)} sweep points, cancellation nonzero at {nondeg}, "
             f"failures {failures if failures else 'none'}")
    assert not failures


# ---------------------------------------------------------------------------
# Estimator studies (criteria 6-7)
# ---------------------------------------------------------------------------


def _toy_feature_map():
    return AnalyticFeatureMap(
        "toy", lambda x: np.array([np.sin(4.0 * x[0]), np.tanh(x[1])]), 2, 2
    )


TOY_W = np.array([0.5, 0.5])


def test_criterion_06_estimator_behavior():
    fmap = _toy_feature_map()
    V = Box.centered([0.4])

    sm_ok = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        state = SetMembershipState.from_box_prior(np.zeros((1, 2)), 1.0, fmap)
        prev_r, monotone = np.inf, True
        for _ in range(25):
            x = rng.uniform(-1.0, 1.0, size=2)
            phi = fmap(x)
            y = TOY_W @ phi + rng.uniform(-0.4, 0.4, size=1)
            state.update(phi, y, V)
            _, r = state.point_estimate()
            monotone = monotone and r[0] <= prev_r + 1e-9
            prev_r = r[0]
        W, r = state.point_estimate()
        if monotone and np.linalg.norm(W[0] - TOY_W) <= r[0] + 1e-9:
            sm_ok += 1

    collapses = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        state = SetMembershipState.from_box_prior(np.zeros((1, 2)), 1.0, fmap)
        try:
            for _ in range(25):
                x = rng.uniform(-1.0, 1.0, size=2)
                phi = fmap(x)
                y = TOY_W @ phi + rng.uniform(-0.4, 0.4, size=1) + 0.05
                state.update(phi, y, V)
        except EmptyFeasibleSetError:
            collapses += 1

    blr_failed = False
    try:
        for bias in (0.0, 0.05):
            rng = np.random.default_rng(3)
            state = BLRState(np.zeros((1, 2)), np.eye(2), 0.4, 0.05, fmap)
            for _ in range(25):
                x = rng.uniform(-1.0, 1.0, size=2)
                phi = fmap(x)
                state.update(phi, TOY_W @ phi
                             + rng.uniform(-0.4, 0.4, size=1) + bias)
    except Exception:
        blr_failed = True

    covered = 0
    for seed in range(500):
        rng = np.random.default_rng(seed)
        state = BLRState(np.zeros((1, 2)), np.eye(2), 0.4, 0.05, fmap)
        ok = True
        for _ in range(50):
            x = rng.uniform(-1.0, 1.0, size=2)
            phi = fmap(x)
            state.update(phi, TOY_W @ phi + rng.uniform(-0.4, 0.4, size=1))
            if np.linalg.norm(state.means[0] - TOY_W) \
                    > state.confidence_max_norm()[0]:
                ok = False
                break
        covered += ok

    ok = (sm_ok == 100 and collapses >= 80 and not blr_failed
          and covered >= 0.95 * 500)
    _verdict(6, "estimator behavior on the toy problem", ok,
             f"well-specified consistent {sm_ok}/100, biased collapse within "
             f"25 samples {collapses}/100 (need >=80), BLR failure "
             f"{blr_failed}, coverage {covered / 500:.3f}")
    assert sm_ok == 100
    assert not blr_failed
    assert covered >= 0.95 * 500
    assert collapses >= 80, (
        "the 0.05 measurement bias empties the feasible set in every run "
        "eventually, but within 25 samples only in roughly a quarter of "
        f"seeds ({collapses}/100 here); the >=80% threshold at 25 samples "
        "is not attainable at these toy constants"
    )


def test_criterion_07_blr_sequential_equals_batch():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 9))
        T = int(rng.integers(20, 201))
        Phi = rng.normal(size=(T, d))
        Y = rng.normal(size=(T, 1))
        L0 = np.eye(d) * rng.uniform(0.5, 2.0)
        w0 = rng.normal(size=d)
        state = BLRState(w0[None, :], L0, 1.0, 0.05,
                         AnalyticFeatureMap("r", lambda x: x, d, d))
        for phi, y in zip(Phi, Y):
            state.update(phi, y)
        Lam = L0 + Phi.T @ Phi
        mean = np.linalg.solve(Lam, L0 @ w0 + Phi.T @ Y[:, 0])
        worst = max(worst,
                    float(np.max(np.abs(state.means[0] - mean))),
                    float(np.max(np.abs(np.linalg.inv(state.Lambda_inv[0])
                                        - Lam))) / max(1.0, np.max(np.abs(Lam))))
    ok = worst <= 1e-8
    _verdict(7, "recursive filter equals batch posterior", ok,
             f"100 datasets, worst deviation {worst:.2e}")
    assert worst <= 1e-8


# ---------------------------------------------------------------------------
# Robust QP correctness (criterion 8)
# ---------------------------------------------------------------------------


def _random_problem(rng, N):
    while True:
        A = rng.uniform(-0.8, 0.8, size=(2, 2))
        A = 0.95 * A / max(1.0, np.max(np.abs(np.linalg.eigvals(A))))
        B = rng.uniform(-1.0, 1.0, size=(2, 1))
        if abs(B[1, 0]) < 0.2:
            continue
        X = Box.centered(rng.uniform(2.0, 4.0, size=2)).to_polytope()
        U = Box.centered([rng.uniform(1.0, 2.0)]).to_polytope()
        D = Box.centered(rng.uniform(0.01, 0.08, size=2))
        problem = make_problem(A, B, N, np.eye(2), np.array([[1.0]]), X, U, D)
        if problem.O is not None and not problem.O.is_empty():
            return problem


def test_criterion_08_robust_qp_correctness():
    rng = np.random.default_rng(13)
    worst_gap = worst_kkt = 0.0
    for _ in range(15):
        N = int(rng.integers(1, 5))   # n * N = 2N <= 8
        problem = _random_problem(rng, N)
        compiled = CompiledMPC(problem)
        sol = compiled.solve(np.zeros(2))
        assert sol.optimal
        worst_kkt = max(worst_kkt, sol.kkt_residual)
        ubar = rng.uniform(-0.2, 0.2, size=(N, 1))
        gains = {key: rng.uniform(-0.3, 0.3, size=(1, 2))
                 for key in compiled._gain_offsets}
        rows = compiled.worst_case_lhs(np.zeros(2), ubar, gains)
        brute = brute_force_worst_case(problem, np.zeros(2), ubar, gains)
        counters = {}
        for tag, value in rows:
            idx = counters.get(tag, 0)
            counters[tag] = idx + 1
            worst_gap = max(worst_gap,
                            abs(value - brute[(tag[0], tag[1], idx)]))
    ok = worst_gap <= 1e-8 and worst_kkt <= 1e-6
    _verdict(8, "worst-case compilation vs vertex enumeration", ok,
             f"15 instances, worst gap {worst_gap:.2e}, "
             f"worst KKT residual {worst_kkt:.2e}")
    assert worst_gap <= 1e-8
    assert worst_kkt <= 1e-6


# ---------------------------------------------------------------------------
# Input-to-state stability proxy (criterion 9)
# ---------------------------------------------------------------------------


class _FixedEstimator:
    def __init__(self, model):
        self._model = model

    def update(self, phi, y):
        pass

    def model(self):
        return self._model


def test_criterion_09_iss_proxy():
    plant = make_double_integrator(matched=True, w1=0.5)
    exact = LinearParamModel(plant.W_true.astype(float), np.zeros(2),
                             plant.feature_map)
    ctrl = AdaptiveCEController(
        plant.A, plant.B, plant.N, plant.Q, plant.R, plant.X, plant.U,
        Box.centered([0.0, 0.0]), _FixedEstimator(exact),
        variant="AdaptiveCE_C",
    )
    x = plant.x0.copy()
    exact_norm = np.inf
    for t in range(100):
        u, diag = ctrl.step(x, t)
        assert diag["feasible"]
        x = plant.A @ x + plant.B @ u + plant.f_true(x)
        exact_norm = min(exact_norm, float(np.linalg.norm(x)))

    ratios = []
    for seed in range(3):
        est = make_blr_estimator(plant, 1000,
                                 np.random.default_rng(500 + seed))
        cfg = ControllerConfig(variant="AdaptiveCE_A", horizon=plant.N)
        noisy = make_controller(cfg, plant.A, plant.B, plant.Q, plant.R,
                                plant.X, plant.U, plant.noise.box,
                                estimator=est)
        log = run_episode(plant, noisy, 300, seed=seed)
        xs = np.array([rec["x"] for rec in log.steps])
        tail = float(np.mean(np.linalg.norm(xs[-100:], axis=1)))
        ratios.append(tail / float(np.max(noisy.budget.D_hat.half_widths)))
    gain = float(np.mean(ratios))

    ok = exact_norm <= 1e-3 and abs(gain - ISS_GAIN_LOCKED) \
        <= 0.2 * ISS_GAIN_LOCKED
    _verdict(9, "ISS proxy", ok,
             f"exact-model ||x|| reaches {exact_norm:.1e}, noisy long-run "
             f"gain {gain:.3f} vs locked {ISS_GAIN_LOCKED} +-20%")
    assert exact_norm <= 1e-3
    assert abs(gain - ISS_GAIN_LOCKED) <= 0.2 * ISS_GAIN_LOCKED


# ---------------------------------------------------------------------------
# Cruise ride quality (criterion 10)
# ---------------------------------------------------------------------------


def test_criterion_10_cruise_ride_quality():
    t0 = time.time()
    ce_total = bench_total = 0.0
    for seed in range(20):
        plant = make_cruise()
        est = make_blr_estimator(plant, 400,
                                 np.random.default_rng(1000 + seed),
                                 prior_precision=1e-4)
        ce = AdaptiveCEController(
            plant.A, plant.B, plant.N, plant.Q, plant.R, plant.X, plant.U,
            plant.noise.box, est, variant="AdaptiveCE_B",
        )
        ce_total += run_episode(plant, ce, 240,
                                seed=seed).metrics["sum_sq_accel"]
        est2 = make_blr_estimator(plant, 400,
                                  np.random.default_rng(2000 + seed),
                                  prior_precision=1e-4)
        bench = BenchmarkController(
            plant.A, plant.B, plant.N, plant.Q, plant.R, plant.X, plant.U,
            plant.noise.box, est2,
        )
        bench_total += run_episode(plant, bench, 240,
                                   seed=seed).metrics["sum_sq_accel"]
    elapsed = time.time() - t0
    ratio = ce_total / bench_total
    ok = ratio <= 0.85 and elapsed <= 300.0
    _verdict(10, "cruise ride quality", ok,
             f"squared-acceleration ratio {ratio:.3f} over 20 seeds, "
             f"{elapsed:.0f}s")
    assert ratio <= 0.85
    assert elapsed <= 300.0


# ---------------------------------------------------------------------------
# Quadrotor wind study (criterion 11)
# ---------------------------------------------------------------------------


def test_criterion_11_quadrotor_qualitative():
    details = []
    ok = True
    for h, theta in enumerate((0.0, np.deg2rad(22.5))):
        plant = make_quadrotor(theta_w=theta)
        bench_est = make_blr_estimator(plant, 3000, np.random.default_rng(1),
                                       prior_precision=1e-4)
        bench = BenchmarkController(
            plant.A, plant.B, plant.N, plant.Q, plant.R, plant.X, plant.U,
            plant.noise.box, bench_est, mpc_mode="prestabilized",
        )
        bench_infeasible = bench._compiled.empty_terminal or \
            not bench._compiled.solve(plant.x0).optimal

        naive = NaiveTubeController(
            plant.A, plant.B, plant.N, plant.Q, plant.R, plant.X, plant.U,
            plant.noise.box, mpc_mode="prestabilized",
        )
        ce_errs, naive_errs, ce_infeasible = [], [], 0
        for seed in range(10):
            est = make_blr_estimator(
                plant, 3000, np.random.default_rng(100 * h + seed),
                prior_precision=1e-4,
            )
            ce = AdaptiveCEController(
                plant.A, plant.B, plant.N, plant.Q, plant.R, plant.X,
                plant.U, plant.noise.box, est, variant="AdaptiveCE_C",
                mpc_mode="prestabilized",
            )
            log = run_episode(plant, ce, 40, seed=seed)
            if log.metrics["infeasible_step"] is not None:
                ce_infeasible += 1
            xs = np.array([rec["x"] for rec in log.steps])
            ce_errs.append(np.mean(np.linalg.norm(xs[:, :2], axis=1)))
            log_n = run_episode(plant, naive, 40, seed=seed)
            xs_n = np.array([rec["x"] for rec in log_n.steps])
            naive_errs.append(np.mean(np.linalg.norm(xs_n[:, :2], axis=1)))
        ce_err, naive_err = float(np.mean(ce_errs)), float(np.mean(naive_errs))
        ok = ok and bench_infeasible and ce_infeasible == 0 \
            and ce_err < naive_err
        details.append(
            f"theta={np.rad2deg(theta):.1f}deg bench_infeasible="
            f"{bench_infeasible} ce_err={ce_err:.3f} naive_err={naive_err:.3f}"
        )
    _verdict(11, "quadrotor wind study", ok, "; ".join(details))
    assert ok
