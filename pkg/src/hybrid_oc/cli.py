"""Scenario-driven command line front end.

    hybrid-oc run <scenario.json> [--out DIR] [--threads N]
    hybrid-oc compare <dirA> <dirB> --metric sup|l2 [--threshold X] [--out FILE]

Exit codes: 0 success, 1 comparison above threshold, 2 invalid input
(schema, parameters, incompatible runs), 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .artifacts import events_rows, read_csv, write_csv, write_json, write_value_grid
from .errors import IncompatibleRuns, SolverError, ValidationError, ZenoDetected
from .hjb_dp import DPGrid, closed_loop, solve_dp
from .hpmp import OptimalControlProblem, ShootingMesh, extremal_flow, mesh_shoot, propagate_lagrangian
from .hybrid_core import FlowConfig, HybridArc, HybridSystem, classify_zeno, flow
from .models import (
    BouncingBallParams,
    MirrorParams,
    NeuronParams,
    build_ball,
    build_ball_extremal,
    build_lqr,
    build_mirror,
    build_neuron,
    zeno_time,
)
from .saltation import caustic_trajectory, conjugate_points, propagate_variational

__all__ = ["main", "run_scenario", "compare_runs", "compare_trajectories", "load_schema", "validate_scenario"]

EXIT_OK, EXIT_THRESHOLD, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2, 3

TASK_MODELS = {
    "simulate": {"ball", "neuron", "lqr", "mirror", "ball_extremal"},
    "variational": {"ball", "ball_extremal"},
    "caustic": {"ball", "ball_extremal"},
    "zeno": {"ball"},
    "dp": {"neuron", "lqr"},
    "shoot": {"neuron", "mirror", "lqr"},
    "lagrangian": {"neuron", "mirror", "lqr"},
}


# ---------------------------------------------------------------------------
# scenario handling


def load_schema() -> dict:
    return json.loads(resources.files("hybrid_oc").joinpath("schema.json").read_text())


def validate_scenario(scenario: dict) -> None:
    """Schema validation plus model/task compatibility.

    Raises:
        ValidationError: with the first schema violation.
    """
    import jsonschema

    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(scenario), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValidationError(f"{where}: {e.message}")
    mid, task = scenario["model"]["id"], scenario["task"]
    if mid not in TASK_MODELS[task]:
        raise ValidationError(f"task {task!r} does not apply to model {mid!r}")


@dataclass
class ModelSpec:
    """Built model plus the id and parameter object it came from."""

    id: str
    model: object
    params: object


def _build(model: dict):
    mid = model["id"]
    params = dict(model.get("params", {}))
    if mid in ("ball", "ball_extremal"):
        with_guard = params.pop("with_guard", True)
        P = BouncingBallParams(**params)
        if mid == "ball":
            return build_ball(P), P
        return build_ball_extremal(P, with_guard=with_guard), P
    if mid == "neuron":
        P = NeuronParams(**params)
        return build_neuron(P), P
    if mid == "mirror":
        P = MirrorParams(**{k: tuple(v) if k in ("A", "B") else v for k, v in params.items()})
        return build_mirror(P), P
    if mid == "lqr":
        kw = dict(params)
        if "x_box" in kw:
            kw["x_box"] = tuple(kw["x_box"])
        return build_lqr(**kw), kw
    raise ValidationError(f"unknown model {mid!r}")


def _system(model) -> HybridSystem:
    return model.system if isinstance(model, OptimalControlProblem) else model


def _names(system: HybridSystem) -> list[str]:
    return list(system.names) if system.names else [f"x{i}" for i in range(system.dim)]


def _dense_full(arc: HybridArc, n_per_unit: int):
    ts, zs = [], []
    for seg in arc.segments:
        k = max(2, int(math.ceil((seg.t_end - seg.t_start) * n_per_unit)) + 1)
        tt = np.linspace(seg.t_start, seg.t_end, k)
        ts.append(tt)
        zs.append(np.asarray(seg.sol(tt - seg.t_start)).T)
    return np.concatenate(ts), np.concatenate(zs)


def _event_header(names):
    return ["k", "t_k"] + [f"{n}_pre" for n in names] + [f"{n}_post" for n in names] + ["guard_id", "beat_count"]


# ---------------------------------------------------------------------------
# tasks; each returns (summary, files, extra manifest fields)


def _task_simulate(spec, st, cfg, out, threads):
    model = spec.model
    system = _system(model)
    names = _names(system)
    x0 = np.asarray(st["x0"], dtype=float)
    status, extra = "completed", {}
    try:
        arc = flow(system, x0, tuple(st["t_span"]), cfg)
    except ZenoDetected as err:
        arc, status = err.arc, "zeno_detected"
        extra["t_zeno"] = err.info.get("t_zeno")
    t, X = arc.dense(st.get("samples_per_unit", 200))
    write_csv(out / "events.csv", _event_header(names), events_rows(arc.events, system.dim))
    write_csv(out / "trajectory.csv", ["t"] + names, ([ti, *xi] for ti, xi in zip(t, X)))
    summary = {"status": status, "n_events": len(arc.events), "t_end": arc.t1, **extra}
    return summary, ["events.csv", "trajectory.csv"], {"trajectory": "trajectory.csv", "state_names": names}


def _task_variational(spec, st, cfg, out, threads):
    model = spec.model
    system = _system(model)
    names = _names(system)
    n = system.dim
    tr = propagate_variational(system, np.asarray(st["x0"], dtype=float), t_span=tuple(st["t_span"]), cfg=cfg)
    t, Z = _dense_full(tr.arc, st.get("samples_per_unit", 200))
    k = n + tr.arc.n_quad
    header = ["t"] + [f"phi_{i}{j}" for i in range(n) for j in range(n)]
    write_csv(out / "phi.csv", header, ([ti, *zi[k : k + n * n]] for ti, zi in zip(t, Z)))
    write_csv(out / "events.csv", _event_header(names), events_rows(tr.arc.events, n))
    files = ["phi.csv", "events.csv"]
    summary = {"n_events": len(tr.arc.events), "phi_final": tr.final.phi.tolist()}
    if st.get("conjugate_points", n % 2 == 0) and n % 2 == 0:
        cps = conjugate_points(tr)
        write_csv(out / "conjugate.csv", ["t", "kind"], ([c["t"], c["kind"]] for c in cps))
        files.append("conjugate.csv")
        summary["conjugate_times"] = [c["t"] for c in cps]
    return summary, files, {"state_names": names}


def _task_caustic(spec, st, cfg, out, threads):
    model = spec.model
    if spec.id == "ball":
        # the caustic lives on the extremal (x, p) flow of the same ball
        model = build_ball_extremal(spec.params)
    m = st["momenta"]
    momenta = np.linspace(m["lo"], m["hi"], m["n"]) if isinstance(m, dict) else np.asarray(m, dtype=float)
    log: list = []
    cloud = caustic_trajectory(model, np.asarray(st["x0"], dtype=float), momenta, tuple(st["t_window"]), cfg, per_unit=st.get("per_unit", 2000), log=log)
    n = len(st["x0"])
    header = (["p0"] if n == 1 else [f"p0_{j}" for j in range(n)]) + ["t_star"] + (["x_star"] if n == 1 else [f"x_star_{j}" for j in range(n)])
    write_csv(out / "caustic.csv", header, ([*np.atleast_1d(p), t, *np.atleast_1d(x)] for p, t, x in cloud))
    summary = {"n_points": len(cloud), "n_skipped": len(log), "skipped": [[float(np.atleast_1d(p)[0]), e] for p, e in log]}
    return summary, ["caustic.csv"], {}


def _task_zeno(spec, st, cfg, out, threads):
    model = spec.model
    P = spec.params
    x0 = np.asarray(st["x0"], dtype=float)
    names = _names(model)
    t_est, status = None, "none"
    try:
        arc = flow(model, x0, (0.0, float(st["t_max"])), cfg)
    except ZenoDetected as err:
        arc, status, t_est = err.arc, "zeno_detected", float(err.info["t_zeno"])
    stationary = P.table == "stationary"
    m, g, c2 = P.m, P.g, P.c**2
    # impact times of the stationary table in closed form (nan otherwise)
    s = math.sqrt(x0[1] ** 2 + 2 * m * m * g * max(x0[0], 0.0))
    rows, prev = [], 0.0
    t_formula = (x0[1] + s) / (m * g) if stationary else math.nan
    for k, e in enumerate(arc.events):
        rows.append([k, e.t, e.t - prev, t_formula])
        prev = e.t
        t_formula += 2 * c2 ** (k + 1) * s / (m * g)
    write_csv(out / "zeno.csv", ["k", "t_k", "gap", "t_k_formula"], rows)
    summary = {
        "status": status,
        "n_events": len(arc.events),
        "t_zeno_estimate": t_est,
        "t_zeno_closed_form": zeno_time(P, float(max(x0[0], 0.0)), float(x0[1])) if stationary else None,
        "classification": classify_zeno(arc, (np.array([-1.0, -1e6]), np.array([1e6, 1e6])), window=min(cfg.zeno_window, max(3, len(arc.events) - 1))),
    }
    return summary, ["zeno.csv"], {}


def _dp_grid(model, st) -> DPGrid:
    gs = dict(st.get("grid", {}))
    if model.name == "neuron":
        return DPGrid.table1(**gs)
    lo, hi = (float(v) for v in (model.system.box[0][0], model.system.box[1][0]))
    args = dict(lo=[lo], hi=[hi], n_nodes=201, n_controls=241, n_steps=200)
    args.update(gs)
    return DPGrid(**args)


def _task_dp(spec, st, cfg, out, threads):
    model = spec.model
    grid = solve_dp(model, _dp_grid(model, st))
    names = _names(model.system)
    files = write_value_grid(out, grid, names, st.get("write_every", 1))
    summary = {
        "slices": int(grid.times.size),
        "nodes": list(grid.shape),
        "clamped_fraction": grid.clamped,
        "flagged": grid.flagged,
        "max_step_diagonals": grid.meta["max_step_diagonals"],
    }
    extra = {"state_names": names, "dt": grid.meta["dt"]}
    if "x0" in st:
        x0 = np.asarray(st["x0"], dtype=float)
        res = closed_loop(model, grid, x0, cfg)
        t, X = res.trajectory(st.get("samples_per_unit", 1000))
        U = [extract_u(grid, ti, xi) for ti, xi in zip(t, X)]
        write_csv(out / "trajectory.csv", ["t"] + names + ["u"], ([ti, *xi, ui] for ti, xi, ui in zip(t, X, U)))
        files.append("trajectory.csv")
        summary.update(cost=res.cost, value_at_x0=grid.value(grid.times[0], x0), policy_clamped=res.clamped, n_events=len(res.arc.events))
        extra["trajectory"] = "trajectory.csv"
    return summary, files, extra


def extract_u(grid, t, x):
    from .hjb_dp import extract_policy

    return extract_policy(grid, float(t), x, clamp=True)


def _task_shoot(spec, st, cfg, out, threads):
    model = spec.model
    n = model.n
    ms = dict(st.get("mesh", {}))
    mesh = ShootingMesh(**ms)
    x0 = np.asarray(st["x0"], dtype=float)
    res = mesh_shoot(model, x0, mesh, cfg, threads=threads, branch_rule=st.get("branch_rule"))
    pn = [f"p{j + 1}" for j in range(n)]
    write_csv(out / "mesh.csv", ["index"] + pn + ["residual", "cost", "n_events", "ok"], ([int(r[0]), *r[1 : 1 + n], r[1 + n], r[2 + n], int(r[3 + n]), int(r[4 + n])] for r in res.table))
    write_csv(out / "candidates.csv", ["kind", "mesh_index"] + pn + ["residual", "cost"], ([c[0], c[1], *c[2], c[3], c[4]] for c in res.candidates))
    best = res.best
    t, Z = best.arc.dense(st.get("samples_per_unit", 1000))
    names = _names(model.system)
    U = [best.H.control(ti, zi[:n], zi[n:]) for ti, zi in zip(t, Z)]
    header = ["t"] + names + [f"p_{nm}" for nm in names] + [f"u{j + 1}" if model.control_dim > 1 else "u" for j in range(model.control_dim)]
    write_csv(out / "best_trajectory.csv", header, ([ti, *zi, *np.atleast_1d(ui)] for ti, zi, ui in zip(t, Z, U)))
    summary = {
        "n_candidates": len(res.candidates),
        "n_refined": len(res.refined),
        "p_init": best.p_init.tolist(),
        "cost": best.cost,
        "residual": best.residual,
        "signature": list(best.signature),
    }
    return summary, ["mesh.csv", "candidates.csv", "best_trajectory.csv"], {"trajectory": "best_trajectory.csv", "state_names": names}


def _task_lagrangian(spec, st, cfg, out, threads):
    model = spec.model
    n = model.n
    axes = [np.linspace(r["lo"], r["hi"], r["n"]) for r in st["samples"]]
    if len(axes) != n:
        raise ValidationError(f"samples need {n} ranges")
    grids = np.meshgrid(*axes, indexing="ij")
    samples = np.stack([g.ravel() for g in grids], axis=1)
    log: list = []
    x0 = st.get("x0")
    rows = propagate_lagrangian(model, st["seed"], float(st["t"]), samples, x0=None if x0 is None else np.asarray(x0, dtype=float), cfg=cfg, log=log)
    names = _names(model.system)
    header = ["index"] + names + [f"p_{nm}" for nm in names] + ["n_events"]
    write_csv(out / "cloud.csv", header, ([int(r[0]), *r[1:-1], int(r[-1])] for r in rows))
    return {"n_points": len(rows), "n_skipped": len(log)}, ["cloud.csv"], {}


TASKS = {
    "simulate": _task_simulate,
    "variational": _task_variational,
    "caustic": _task_caustic,
    "zeno": _task_zeno,
    "dp": _task_dp,
    "shoot": _task_shoot,
    "lagrangian": _task_lagrangian,
}


def run_scenario(scenario: dict, out: Path, threads: int = 1) -> tuple[int, str]:
    """Validate and run one scenario, writing artifacts under ``out``.

    Returns:
        ``(exit_code, one-line summary)``.
    """
    try:
        validate_scenario(scenario)
        model, params = _build(scenario["model"])
        spec = ModelSpec(scenario["model"]["id"], model, params)
        cfg = FlowConfig(**scenario.get("flow", {}))
    except (ValidationError, TypeError) as err:
        return EXIT_INVALID, f"invalid scenario: {err}"
    task = scenario["task"]
    manifest = {
        "version": __version__,
        "name": scenario.get("name", ""),
        "model": scenario["model"],
        "task": task,
        "settings": scenario.get("settings", {}),
        "flow": scenario.get("flow", {}),
    }
    out.mkdir(parents=True, exist_ok=True)
    try:
        summary, files, extra = TASKS[task](spec, scenario.get("settings", {}), cfg, out, threads)
    except (ValidationError, ValueError) as err:
        return EXIT_INVALID, f"{task}: invalid settings: {err}"
    except SolverError as err:
        manifest.update(status="failed", error=type(err).__name__, message=str(err))
        write_json(out / "run.json", manifest)
        return EXIT_SOLVER, f"{task}: FAILED {type(err).__name__}: {err}"
    manifest.update(status="ok", summary=summary, files=files, **extra)
    write_json(out / "run.json", manifest)
    brief = ", ".join(f"{k}={_short(v)}" for k, v in summary.items() if not isinstance(v, (list, dict)))
    return EXIT_OK, f"{task}: ok ({brief}) -> {out}"


def _short(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


# ---------------------------------------------------------------------------
# comparison


def _read_trajectory(run_dir: Path):
    man = json.loads((run_dir / "run.json").read_text())
    if man.get("status") != "ok" or "trajectory" not in man:
        raise IncompatibleRuns(f"{run_dir} has no trajectory output")
    header, rows = read_csv(run_dir / man["trajectory"])
    names = man["state_names"]
    cols = [header.index(nm) for nm in names]
    A = np.array([[float(r[0])] + [float(r[c]) for c in cols] for r in rows])
    return man, A[:, 0], A[:, 1:]


def compare_trajectories(tA, XA, tB, XB, metric: str = "sup", slack: float = 0.0) -> float:
    """Distance between two sampled hybrid trajectories.

    ``sup``: symmetric sup over samples of the distance to the other
    trajectory's samples within ``slack`` in time (so jumps that happen a
    fraction of a time step apart are not counted as full jumps); the
    max-norm over state coordinates is used. ``l2``: root of the time integral
    of the squared Euclidean distance on a common uniform grid, using
    right-continuous interpolation.
    """
    tA, tB = np.asarray(tA, dtype=float), np.asarray(tB, dtype=float)
    XA, XB = np.atleast_2d(XA), np.atleast_2d(XB)
    if metric == "sup":

        def one_way(t1, X1, t2, X2):
            worst = 0.0
            j0 = 0
            for ti, xi in zip(t1, X1):
                lo = np.searchsorted(t2, ti - slack - 1e-12, side="left")
                hi = np.searchsorted(t2, ti + slack + 1e-12, side="right")
                if hi <= lo:
                    j = min(max(np.searchsorted(t2, ti), 0), t2.size - 1)
                    lo, hi = max(j - 1, 0), min(j + 1, t2.size)
                d = np.min(np.max(np.abs(X2[lo:hi] - xi), axis=1))
                worst = max(worst, float(d))
                j0 = lo
            return worst

        return max(one_way(tA, XA, tB, XB), one_way(tB, XB, tA, XA))
    if metric == "l2":
        t0, t1 = max(tA[0], tB[0]), min(tA[-1], tB[-1])
        grid = np.linspace(t0, t1, 4001)

        def right_interp(t, X):
            # keep the last sample at duplicated (event) times: right limits
            keep = np.append(np.diff(t) > 0, True)
            return np.stack([np.interp(grid, t[keep], X[keep, j]) for j in range(X.shape[1])], axis=1)

        D = right_interp(tA, XA) - right_interp(tB, XB)
        return float(math.sqrt(np.trapezoid(np.sum(D * D, axis=1), grid)))
    raise ValidationError(f"unknown metric {metric!r}")


def compare_runs(dir_a, dir_b, metric: str = "sup", slack: Optional[float] = None) -> dict:
    """Compare the trajectory outputs of two runs of the same model.

    The default time slack is the larger DP time step recorded in the runs
    (zero when neither is a DP run).

    Raises:
        IncompatibleRuns: different models or missing trajectories.
    """
    ma, tA, XA = _read_trajectory(Path(dir_a))
    mb, tB, XB = _read_trajectory(Path(dir_b))
    if ma["model"] != mb["model"]:
        raise IncompatibleRuns(f"models differ: {ma['model']} vs {mb['model']}")
    if ma["state_names"] != mb["state_names"]:
        raise IncompatibleRuns("state names differ")
    if slack is None:
        slack = max(float(ma.get("dt", 0.0)), float(mb.get("dt", 0.0)))
    return {"metric": metric, "distance": compare_trajectories(tA, XA, tB, XB, metric, slack), "slack": slack}


# ---------------------------------------------------------------------------
# entry point


def _threads(arg: Optional[int]) -> int:
    env = os.environ.get("HYBRID_OC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"HYBRID_OC_THREADS must be an integer, got {env!r}")
    return max(1, arg or 1)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hybrid-oc", description="Optimal control of hybrid dynamical systems.")
    parser.add_argument("--version", action="version", version=f"hybrid-oc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    pr = sub.add_parser("run", help="run one scenario file")
    pr.add_argument("scenario", type=Path)
    pr.add_argument("--out", type=Path, default=None, help="output directory (overrides the scenario's 'output')")
    pr.add_argument("--threads", type=int, default=None, help="worker processes (HYBRID_OC_THREADS overrides)")
    pc = sub.add_parser("compare", help="compare the trajectories of two runs")
    pc.add_argument("dir_a", type=Path)
    pc.add_argument("dir_b", type=Path)
    pc.add_argument("--metric", choices=["sup", "l2"], default="sup")
    pc.add_argument("--threshold", type=float, default=None)
    pc.add_argument("--slack", type=float, default=None, help="time slack for the sup metric (default: DP time step)")
    pc.add_argument("--out", type=Path, default=Path("compare.csv"), help="report CSV")
    args = parser.parse_args(argv)

    if args.command == "run":
        try:
            scenario = json.loads(args.scenario.read_text())
            threads = _threads(args.threads)
        except (OSError, json.JSONDecodeError, ValidationError) as err:
            print(f"invalid scenario: {err}")
            return EXIT_INVALID
        if not isinstance(scenario, dict):
            print("invalid scenario: top level must be an object")
            return EXIT_INVALID
        out = args.out or Path(scenario.get("output") or f"{args.scenario.stem}_out")
        code, line = run_scenario(scenario, out, threads)
        print(line)
        return code

    try:
        rep = compare_runs(args.dir_a, args.dir_b, args.metric, args.slack)
    except (IncompatibleRuns, OSError, KeyError, json.JSONDecodeError) as err:
        print(f"compare: IncompatibleRuns: {err}")
        return EXIT_INVALID
    passed = args.threshold is None or rep["distance"] <= args.threshold
    write_csv(args.out, ["metric", "distance", "slack", "threshold", "pass"], [[rep["metric"], rep["distance"], rep["slack"], "" if args.threshold is None else args.threshold, passed]])
    print(f"compare: {rep['metric']} distance {rep['distance']:.6g} (slack {rep['slack']:g})" + ("" if args.threshold is None else f", threshold {args.threshold:g}: {'pass' if passed else 'FAIL'}"))
    return EXIT_OK if passed else EXIT_THRESHOLD


if __name__ == "__main__":
    sys.exit(main())
