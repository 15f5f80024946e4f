"""Experiment driver: load a JSON config, run campaigns, emit logs and figures.

Subcommands
-----------
``run CONFIG --out DIR [--seed S] [--jobs J]``
    Run the configured closed-loop campaign over its seed list, writing one
    RunLog CSV/JSON pair per seed, a campaign summary, and rendered figures.
``sweep CONFIG --param NAME --values CSVLIST --out DIR``
    Grid one scalar parameter; emits a tidy CSV with paired rows per value
    for the configured controller and the benchmark, plus a figure.
``verify SUITE``
    Run the tagged property/acceptance test suites and print a pass/fail
    table.  Suites: geometry, estimators, mpc, closed_loop.

The default output directory may be supplied through the ``ARMPC_OUT_DIR``
environment variable; ``--out`` overrides it.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import controller, simulation
from .controller import VARIANTS, ControllerConfig

SUMMARY_SCHEMA = "armpc-summary-v1"
SWEEP_SCHEMA = "armpc-sweep-v1"

PLANTS = {
    "double_integrator": simulation.make_double_integrator,
    "quadrotor": simulation.make_quadrotor,
    "cruise": simulation.make_cruise,
}

VERIFY_SUITES = {
    "geometry": ["test_geometry.py", "test_invariant.py"],
    "estimators": ["test_estimation.py", "test_uncertainty_sets.py"],
    "mpc": ["test_optimization.py", "test_robust_mpc.py"],
    "closed_loop": ["test_controller.py", "test_simulation.py",
                    "test_acceptance.py"],
}


class ConfigError(ValueError):
    """Config validation failure; `field` is the dotted path of the offender."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


# ---------------------------------------------------------------------------
# Config loading and validation
# ---------------------------------------------------------------------------


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError("<config>", f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("<config>", f"invalid JSON: {exc}") from exc
    return validate_config(cfg)


def _section(cfg, name, required=True):
    value = cfg.get(name)
    if value is None:
        if required:
            raise ConfigError(name, "missing section")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(name, "must be an object")
    return value


def _pos_int(section, field, value):
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        raise ConfigError(f"{section}.{field}", "must be a positive integer")
    return value


def validate_config(cfg):
    """Normalize and validate a config dict; raises ConfigError with paths."""
    if not isinstance(cfg, dict):
        raise ConfigError("<config>", "top level must be an object")
    plant = _section(cfg, "plant")
    ctrl = _section(cfg, "controller")
    est = _section(cfg, "estimator", required=False)
    exp = _section(cfg, "experiment")

    name = plant.get("name")
    if name not in PLANTS:
        raise ConfigError("plant.name",
                          f"unknown plant {name!r}; one of {sorted(PLANTS)}")
    params = plant.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("plant.params", "must be an object")
    for key in ("Q", "R"):
        if key in plant:
            try:
                M = np.array(plant[key], dtype=float)
            except (TypeError, ValueError):
                raise ConfigError(f"plant.{key}", "must be a numeric matrix")
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise ConfigError(f"plant.{key}", "must be a square matrix")
            if not np.allclose(M, M.T, atol=1e-9):
                raise ConfigError(f"plant.{key}", "must be symmetric")
            if key == "Q" and np.min(np.linalg.eigvalsh(M)) < -1e-9:
                raise ConfigError("plant.Q", "must be positive semidefinite")
            if key == "R":
                try:
                    np.linalg.cholesky(M)
                except np.linalg.LinAlgError:
                    raise ConfigError("plant.R", "must be positive definite")

    variant = ctrl.get("variant")
    if variant not in VARIANTS:
        raise ConfigError("controller.variant",
                          f"unknown variant {variant!r}; one of {list(VARIANTS)}")
    if "horizon" in ctrl:
        _pos_int("controller", "horizon", ctrl["horizon"])
    mode = ctrl.get("mpc_mode", "affine")
    if mode not in ("affine", "prestabilized"):
        raise ConfigError("controller.mpc_mode",
                          "must be 'affine' or 'prestabilized'")
    scale = ctrl.get("terminal_r_scale", 1.0)
    if not isinstance(scale, (int, float)) or scale <= 0:
        raise ConfigError("controller.terminal_r_scale", "must be positive")

    if variant != "NaiveTube":
        kind = est.get("type", "blr")
        if kind not in ("blr", "sm"):
            raise ConfigError("estimator.type", "must be 'blr' or 'sm'")
        delta = est.get("delta", 0.05)
        if not 0.0 < delta < 1.0:
            raise ConfigError("estimator.delta", "must lie in (0, 1)")
        warmup = est.get("warmup", 0)
        if not isinstance(warmup, int) or warmup < 0:
            raise ConfigError("estimator.warmup",
                              "must be a non-negative integer")
        if kind == "sm" and "prior_half_width" not in est:
            raise ConfigError("estimator.prior_half_width",
                              "required for set-membership estimation")

    _pos_int("experiment", "T", exp.get("T"))
    seeds = exp.get("seeds")
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) for s in seeds)):
        raise ConfigError("experiment.seeds",
                          "must be a non-empty list of integers")
    return cfg


# ---------------------------------------------------------------------------
# Campaign assembly
# ---------------------------------------------------------------------------


def build_plant(cfg):
    plant_cfg = cfg["plant"]
    factory = PLANTS[plant_cfg["name"]]
    try:
        plant = factory(**plant_cfg.get("params", {}))
    except TypeError as exc:
        raise ConfigError("plant.params", str(exc)) from exc
    overrides = {}
    for key in ("Q", "R"):
        if key in plant_cfg:
            M = np.array(plant_cfg[key], dtype=float)
            if M.shape[0] != getattr(plant, key).shape[0]:
                raise ConfigError(f"plant.{key}",
                                  f"wrong dimension for plant {plant.name}")
            overrides[key] = M
    if overrides:
        plant = dataclasses.replace(plant, **overrides)
    return plant


def build_estimator(cfg, plant, seed):
    """Warm-started estimator; deterministic given the run seed."""
    est_cfg = cfg.get("estimator", {})
    rng = np.random.default_rng(seed + 90_001)
    warmup = est_cfg.get("warmup", 0)
    if est_cfg.get("type", "blr") == "sm":
        return simulation.make_sm_estimator(
            plant, est_cfg["prior_half_width"], rng, warmup
        )
    return simulation.make_blr_estimator(
        plant, warmup, rng,
        delta=est_cfg.get("delta", 0.05),
        prior_precision=est_cfg.get("prior_precision"),
    )


def build_controller(cfg, plant, estimator, variant=None):
    ctrl_cfg = cfg["controller"]
    variant = variant or ctrl_cfg["variant"]
    config = ControllerConfig(
        variant=variant,
        horizon=ctrl_cfg.get("horizon", plant.N),
        delta=cfg.get("estimator", {}).get("delta", 0.05),
        estimator=cfg.get("estimator", {}).get("type", "blr"),
    )
    return controller.make_controller(
        config, plant.A, plant.B, plant.Q, plant.R,
        plant.X, plant.U, plant.noise.box,
        estimator=None if variant == "NaiveTube" else estimator,
        mpc_mode=ctrl_cfg.get("mpc_mode", "affine"),
        terminal_r_scale=ctrl_cfg.get("terminal_r_scale", 1.0),
    )


def run_one(cfg, seed, variant=None):
    plant = build_plant(cfg)
    variant = variant or cfg["controller"]["variant"]
    est = None
    if variant != "NaiveTube":
        est = build_estimator(cfg, plant, seed)
    ctrl = build_controller(cfg, plant, est, variant=variant)
    log = simulation.run_episode(
        plant, ctrl, cfg["experiment"]["T"], seed,
        config={"plant": plant.name, "variant": variant},
        new_episode=True,
    )
    return log


# ---------------------------------------------------------------------------
# run subcommand
# ---------------------------------------------------------------------------


def _campaign_summary(cfg, logs, seeds):
    costs = [log.metrics["cost"] for log in logs]
    return {
        "schema": SUMMARY_SCHEMA,
        "plant": cfg["plant"]["name"],
        "variant": cfg["controller"]["variant"],
        "seeds": list(seeds),
        "mean_cost": float(np.mean(costs)),
        "cost_quantiles": [float(q) for q in
                           np.quantile(costs, [0.25, 0.5, 0.75])],
        "total_violations": int(sum(log.metrics["violations"]
                                    for log in logs)),
        "infeasibility_rate": float(np.mean(
            [log.metrics["infeasible_step"] is not None for log in logs]
        )),
        "confidence_event_fraction": float(np.mean(
            [log.metrics["confidence_event"] for log in logs]
        )),
        "mean_sum_sq_accel": float(np.mean(
            [log.metrics["sum_sq_accel"] for log in logs]
        )),
    }


def _write_summary_csv(path, summary):
    keys = ["plant", "variant", "mean_cost", "total_violations",
            "infeasibility_rate", "confidence_event_fraction",
            "mean_sum_sq_accel"]
    with open(path, "w") as fh:
        fh.write(f"# schema={SUMMARY_SCHEMA}\n")
        fh.write(",".join(keys) + "\n")
        fh.write(",".join(str(summary[k]) for k in keys) + "\n")


def _render_run_figures(out_dir, logs):
    """State and input trajectories across seeds, rendered to PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = np.atleast_1d(logs[0].steps[0]["x"]).size
    m = np.atleast_1d(logs[0].steps[0]["u"]).size
    fig, axes = plt.subplots(n, 1, sharex=True, figsize=(7, 1.8 * n),
                             squeeze=False)
    for log in logs:
        xs = np.array([rec["x"] for rec in log.steps])
        for i in range(n):
            axes[i, 0].plot(xs[:, i], lw=0.8, alpha=0.7)
    for i in range(n):
        axes[i, 0].set_ylabel(f"x{i}")
    axes[-1, 0].set_xlabel("step")
    fig.suptitle("closed-loop states")
    fig.savefig(out_dir / "states.png", dpi=120, bbox_inches="tight")
    plt.close(fig)

    fig, axes = plt.subplots(m, 1, sharex=True, figsize=(7, 2.0 * m),
                             squeeze=False)
    for log in logs:
        us = np.array([np.atleast_1d(rec["u"]) for rec in log.steps])
        for i in range(m):
            axes[i, 0].plot(us[:, i], lw=0.8, alpha=0.7)
    for i in range(m):
        axes[i, 0].set_ylabel(f"u{i}")
    axes[-1, 0].set_xlabel("step")
    fig.suptitle("applied inputs")
    fig.savefig(out_dir / "inputs.png", dpi=120, bbox_inches="tight")
    plt.close(fig)


def cmd_run(args):
    cfg = load_config(args.config)
    out_dir = _resolve_out(args.out)
    seeds = [args.seed] if args.seed is not None else cfg["experiment"]["seeds"]
    run_fns = [lambda s=s: run_one(cfg, s) for s in seeds]
    logs = simulation.run_campaign(run_fns, jobs=args.jobs)
    for seed, log in zip(seeds, logs):
        log.to_csv(out_dir / f"run_seed{seed}.csv")
        log.to_json(out_dir / f"run_seed{seed}.json")
    summary = _campaign_summary(cfg, logs, seeds)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    _write_summary_csv(out_dir / "summary.csv", summary)
    _render_run_figures(out_dir, logs)
    print(f"wrote {len(logs)} runs to {out_dir}  "
          f"(mean cost {summary['mean_cost']:.4g}, "
          f"violations {summary['total_violations']}, "
          f"infeasibility rate {summary['infeasibility_rate']:.2f})")
    return 0


# ---------------------------------------------------------------------------
# sweep subcommand
# ---------------------------------------------------------------------------


def _set_by_path(cfg, dotted, value):
    """Assign into the config by dotted path; bare names go to plant.params."""
    path = dotted.split(".") if "." in dotted else ["plant", "params", dotted]
    node = cfg
    for key in path[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, "path does not address a config object")
    node[path[-1]] = value
    return cfg


def _sweep_point(cfg, variant, seeds, want_envelope):
    costs, feasible = [], True
    for seed in seeds:
        log = run_one(cfg, seed, variant=variant)
        costs.append(log.metrics["cost"])
        feasible = feasible and log.metrics["infeasible_step"] is None
    frac = ""
    if want_envelope:
        plant = build_plant(cfg)
        est = None
        if variant != "NaiveTube":
            est = build_estimator(cfg, plant, seeds[0])
        ctrl = build_controller(cfg, plant, est, variant=variant)
        ctrl.start_episode()
        if getattr(ctrl, "_compiled", None) is None:
            frac = 0.0
        else:
            frac = simulation.feasible_envelope(
                ctrl._compiled, plant.X,
                resolution=cfg["experiment"].get("envelope_resolution", 41),
            )
    q = np.quantile(costs, [0.25, 0.75])
    return {
        "cost_mean": float(np.mean(costs)),
        "cost_q25": float(q[0]),
        "cost_q75": float(q[1]),
        "feasible": int(feasible),
        "envelope_fraction": frac,
    }


def cmd_sweep(args):
    base = load_config(args.config)
    out_dir = _resolve_out(args.out)
    raw = [v for v in args.values.split(",") if v.strip()]
    if not raw:
        print("no sweep values given; nothing to do")
        return 0
    values = [float(v) for v in raw]
    seeds = base["experiment"]["seeds"]
    variants = list(dict.fromkeys(
        [base["controller"]["variant"]]
        + base["experiment"].get("sweep_controllers", ["BenchmarkARMPC"])
    ))
    want_env = bool(base["experiment"].get("envelope", False))
    rows = []
    for value in values:
        cfg = _set_by_path(copy.deepcopy(base), args.param, value)
        validate_config(cfg)
        for variant in variants:
            point = _sweep_point(cfg, variant, seeds, want_env)
            rows.append({"param": args.param, "value": value,
                         "controller": variant, **point})
    cols = ["param", "value", "controller", "cost_mean", "cost_q25",
            "cost_q75", "feasible", "envelope_fraction"]
    with open(out_dir / "sweep.csv", "w") as fh:
        fh.write(f"# schema={SWEEP_SCHEMA}\n")
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    _render_sweep_figure(out_dir, rows, args.param, want_env)
    print(f"wrote sweep over {args.param} "
          f"({len(values)} values x {len(variants)} controllers) to {out_dir}")
    return 0


def _render_sweep_figure(out_dir, rows, param, want_env):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metric = "envelope_fraction" if want_env else "cost_mean"
    fig, ax = plt.subplots(figsize=(6, 4))
    variants = sorted({row["controller"] for row in rows})
    for variant in variants:
        pts = [(row["value"], row[metric]) for row in rows
               if row["controller"] == variant and row[metric] != ""]
        if pts:
            xs, ys = zip(*sorted(pts))
            ax.plot(xs, ys, marker="o", label=variant)
    ax.set_xlabel(param)
    ax.set_ylabel(metric.replace("_", " "))
    ax.legend()
    fig.savefig(out_dir / "sweep.png", dpi=120, bbox_inches="tight")
    plt.close(fig)


# ---------------------------------------------------------------------------
# verify subcommand
# ---------------------------------------------------------------------------


def _tests_dir():
    for cand in (Path.cwd() / "tests",
                 Path(__file__).resolve().parents[2] / "tests"):
        if cand.is_dir():
            return cand
    return None


def cmd_verify(args):
    files = VERIFY_SUITES.get(args.suite)
    if files is None:
        print(f"unknown suite {args.suite!r}; "
              f"one of {sorted(VERIFY_SUITES)}", file=sys.stderr)
        return 2
    tests = _tests_dir()
    if tests is None:
        print("cannot locate the tests directory; run from a source checkout",
              file=sys.stderr)
        return 2
    results = []
    for fname in files:
        path = tests / fname
        proc = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", str(path)],
            capture_output=True, text=True,
        )
        results.append((fname, proc.returncode == 0, proc))
    width = max(len(f) for f, _, _ in results)
    for fname, ok, proc in results:
        print(f"{fname:<{width}}  {'PASS' if ok else 'FAIL'}")
        if not ok:
            sys.stdout.write(proc.stdout[-2000:])
    return 0 if all(ok for _, ok, _ in results) else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _resolve_out(out):
    out = out or os.environ.get("ARMPC_OUT_DIR")
    if not out:
        raise ConfigError("--out", "no output directory "
                          "(pass --out or set ARMPC_OUT_DIR)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def build_parser():
    parser = argparse.ArgumentParser(
        prog="armpc",
        description="Adaptive robust MPC experiment driver",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a closed-loop campaign")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="grid one scalar parameter")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", required=True)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_verify = sub.add_parser("verify", help="run a test suite")
    p_verify.add_argument("suite")
    p_verify.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except AssertionError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
