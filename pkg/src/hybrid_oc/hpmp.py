"""Hybrid maximum principle: optimal Hamiltonian, extremal flows and shooting.

The extremal flow lives on ``z = (x, p)``. Guards are lifted from the state
space unchanged (``h(z) = h(x)``). At a crossing the state is reset and the
costate is lifted by the forward corner conditions with a configurable branch
rule. Resets that are constant on their chart (the neuron's beating branches)
leave ``p+`` undetermined; the flow then closes the post-event two-point
problem by Newton's method and reports the mismatch between the arriving
costate and the one required by the backward beating conditions.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.spatial import cKDTree

from .corner import (
    Hamiltonian,
    select_branch,
    solve_corner_backward,
    solve_corner_beating,
    solve_corner_forward,
)
from .errors import NoCandidate, SolverError, UnboundedBelow, Underdetermined, ValidationError
from .hybrid_core import (
    FlowConfig,
    GuardChart,
    HybridArc,
    HybridSystem,
    ResetEvent,
    fd_jacobian,
    flow,
)
from .saltation import event_saltation

__all__ = [
    "OptimalControlProblem",
    "ImageChart",
    "optimal_hamiltonian",
    "extremal_system",
    "ExtremalArc",
    "extremal_flow",
    "shooting_residual",
    "newton_shoot",
    "ShootingMesh",
    "MeshResult",
    "mesh_shoot",
    "propagate_lagrangian",
    "intersect_clouds",
]

Array = np.ndarray


@dataclass
class ImageChart:
    """Guard for backward flows: the image ``Delta(Sigma)`` of a chart.

    ``h`` vanishes on the image; ``transversal_sign`` is the firing direction
    in reversed time. ``inverse_reset`` maps image points back to the guard.
    """

    chart_id: str
    h: Callable
    inverse_reset: Callable
    domain: Optional[Callable] = None
    transversal_sign: int = 1


@dataclass
class OptimalControlProblem:
    """Hybrid optimal control problem.

    Attributes:
        system: Controlled hybrid system, field ``f(t, x, u)``.
        running_cost: ``l(t, x, u)``.
        horizon: ``(t0, tf)``.
        terminal_cost: ``g(x)`` (Problem 1). Exactly one of ``terminal_cost``
            and ``x_final`` is set.
        terminal_gradient: ``dg(x)``; central differences if omitted.
        x_final: Fixed endpoint (Problem 2).
        control_dim: Number of inputs.
        control_bounds: ``(lo, hi)`` box or ``None`` (unbounded).
        p0: Cost multiplier (normal case 1).
        affine: ``(f0(t, x), G(t, x))`` with ``f = f0 + G u``.
        quadratic_cost: ``(R, r(t, x))`` with ``l = u'Ru/2 + r'u + l(t, x, 0)``.
        hamiltonian: Closed-form optimal Hamiltonian, overrides construction.
        image_charts: Guards for backward (time-reversed) propagation.
        branch_rule: Forward corner branch rule.
        name: Model identifier.
    """

    system: HybridSystem
    running_cost: Callable
    horizon: tuple[float, float]
    terminal_cost: Optional[Callable] = None
    terminal_gradient: Optional[Callable] = None
    x_final: Optional[Array] = None
    control_dim: int = 1
    control_bounds: Optional[tuple] = None
    p0: float = 1.0
    affine: Optional[tuple] = None
    quadratic_cost: Optional[tuple] = None
    hamiltonian: Optional[Hamiltonian] = None
    image_charts: list = field(default_factory=list)
    branch_rule: str = "nonidentity"
    name: str = "ocp"
    _H: Optional[Hamiltonian] = field(default=None, repr=False)

    def __post_init__(self):
        if (self.terminal_cost is None) == (self.x_final is None):
            raise ValidationError("set exactly one of terminal_cost and x_final")
        if self.x_final is not None:
            self.x_final = np.asarray(self.x_final, dtype=float)
        if self.control_bounds is not None:
            lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in self.control_bounds)
            if np.any(lo > hi):
                raise ValidationError("control lower bound exceeds upper bound")
            self.control_bounds = (lo, hi)

    @property
    def n(self) -> int:
        return self.system.dim

    def dg(self, x: Array) -> Array:
        if self.terminal_gradient is not None:
            return np.asarray(self.terminal_gradient(x), dtype=float)
        return fd_jacobian(lambda y: float(self.terminal_cost(y)), x)[0]

    def pre_hamiltonian(self, t, x, p, u) -> float:
        return self.p0 * float(self.running_cost(t, x, u)) + float(np.dot(p, self.system.field(t, x, u)))

    @property
    def H(self) -> Hamiltonian:
        if self._H is None:
            self._H = optimal_hamiltonian(self)
        return self._H


# ---------------------------------------------------------------------------
# optimal Hamiltonian


def optimal_hamiltonian(ocp: OptimalControlProblem) -> Hamiltonian:
    """Minimized Hamiltonian ``H(t, x, p) = min_u p0 l + p.f`` with its argmin.

    Closed form when the field is control-affine and the cost quadratic in u
    (stationarity, projected onto the box for diagonal R); otherwise bounded
    scalar minimization (tolerance 1e-10) or L-BFGS-B for vector controls.

    Raises:
        UnboundedBelow: R is not positive definite and U is unbounded.
    """
    if ocp.hamiltonian is not None:
        return ocp.hamiltonian
    m = ocp.control_dim
    bounds = ocp.control_bounds
    p0 = ocp.p0

    if ocp.affine is not None and ocp.quadratic_cost is not None:
        f0, G = ocp.affine
        R, r = ocp.quadratic_cost
        R = np.atleast_2d(np.asarray(R, dtype=float))
        eig = np.linalg.eigvalsh(0.5 * (R + R.T))
        if (p0 <= 0 or eig.min() <= 0) and bounds is None:
            raise UnboundedBelow("quadratic cost is not positive definite and U is unbounded")
        diagonal = np.allclose(R, np.diag(np.diag(R)))
        Rinv = np.linalg.inv(R) if eig.min() > 0 else None

        def control(t, x, p):
            Gm = np.atleast_2d(np.asarray(G(t, x), dtype=float)).reshape(len(x), m)
            lin = Gm.T @ np.asarray(p, dtype=float) + p0 * np.atleast_1d(r(t, x))
            if Rinv is not None and p0 > 0:
                u = -Rinv @ lin / p0
                if bounds is None:
                    return u
                if diagonal:
                    return np.clip(u, bounds[0], bounds[1])
            return _box_min(lambda w: 0.5 * p0 * w @ R @ w + lin @ w, m, bounds, x0=np.zeros(m))

    else:

        def control(t, x, p):
            fun = lambda w: ocp.pre_hamiltonian(t, x, p, w)  # noqa: E731
            return _generic_min(fun, m, bounds)

    def value(t, x, p):
        u = control(t, x, p)
        return ocp.pre_hamiltonian(t, x, p, u)

    def grad_p(t, x, p):  # envelope theorem
        return np.asarray(ocp.system.field(t, x, control(t, x, p)), dtype=float)

    def grad_x(t, x, p):
        u = control(t, x, p)
        return fd_jacobian(lambda y: ocp.pre_hamiltonian(t, y, p, u), np.asarray(x, dtype=float))[0]

    def running(t, x, p):
        return float(ocp.running_cost(t, x, control(t, x, p)))

    return Hamiltonian(ocp.n, value, grad_x, grad_p, None, control, running, p0)


def _box_min(fun, m, bounds, x0):
    if bounds is None:
        res = minimize(fun, x0, method="BFGS", options={"gtol": 1e-12})
        return res.x
    lo, hi = bounds
    res = minimize(fun, np.clip(x0, lo, hi), method="L-BFGS-B", bounds=list(zip(lo, hi)), options={"ftol": 1e-15, "gtol": 1e-12})
    return res.x


def _generic_min(fun, m, bounds):
    if m == 1:
        if bounds is not None:
            lo, hi = float(bounds[0][0]), float(bounds[1][0])
            grid = np.linspace(lo, hi, 65)
            vals = [fun(np.array([w])) for w in grid]
            i = int(np.argmin(vals))
            a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
            res = minimize_scalar(lambda w: fun(np.array([w])), bounds=(a, b), method="bounded", options={"xatol": 1e-10})
            cands = [(res.fun, res.x), (vals[i], grid[i])]
            return np.array([min(cands)[1]])
        res = minimize_scalar(lambda w: fun(np.array([w])), method="brent", tol=1e-12)
        for big in (1e6, -1e6):
            if fun(np.array([big])) < res.fun - 1e-9 * max(1.0, abs(res.fun)):
                raise UnboundedBelow("pre-Hamiltonian decreases without bound")
        return np.array([res.x])
    if bounds is None:
        res = minimize(fun, np.zeros(m), method="BFGS")
        for sgn in (1, -1):
            if fun(sgn * 1e6 * np.ones(m)) < res.fun - 1e-9 * max(1.0, abs(res.fun)):
                raise UnboundedBelow("pre-Hamiltonian decreases without bound")
        return res.x
    return _box_min(fun, m, bounds, np.zeros(m))


# ---------------------------------------------------------------------------
# extremal system


def extremal_system(
    H: Hamiltonian,
    charts: Sequence[GuardChart],
    box: Optional[tuple] = None,
    branch_rule: str = "nonidentity",
    time_dependent: bool = False,
    names: Optional[list[str]] = None,
) -> HybridSystem:
    """Lift a set of state-space guard charts to the cotangent bundle.

    The lifted reset solves the forward corner conditions and picks a root with
    ``branch_rule``. Non-immersive resets raise :class:`Underdetermined` from
    inside the flow (the caller closes them as beating events).
    """
    n = H.n

    def lift(c: GuardChart) -> GuardChart:
        def reset(t, z):
            x, p = z[:n], z[n:]
            sols = solve_corner_forward(H, c, x, p, t, time_dependent)
            s = select_branch(sols, branch_rule, H, c)
            return np.concatenate([np.asarray(c.reset(t, x), dtype=float), s.p_plus])

        grad = None
        if c.grad is not None:
            grad = lambda t, z, c=c: np.concatenate([np.asarray(c.grad(t, z[:n]), dtype=float), np.zeros(n)])  # noqa: E731
        dom = None
        if c.domain is not None:
            dom = lambda t, z, c=c: c.domain(t, z[:n])  # noqa: E731
        return GuardChart(
            id=c.id,
            h=lambda t, z, c=c: c.h(t, z[:n]),
            reset=reset,
            domain=dom,
            transversal_sign=c.transversal_sign,
            grad=grad,
            dh_dt=(lambda t, z, c=c: c.dh_dt(t, z[:n])) if c.dh_dt is not None else None,
        )

    lifted = [lift(c) for c in charts]
    if box is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in box)
        box = (np.concatenate([lo, np.full(n, -np.inf)]), np.concatenate([hi, np.full(n, np.inf)]))
    if names is None:
        names = [f"x{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)]
    sys = HybridSystem(
        2 * n,
        lambda t, z, u=None: H.canonical(t, z),
        lifted,
        box,
        time_dependent,
        names,
        jacobian=lambda t, z, u=None: H.canonical_jacobian(t, z),
    )
    sys.base_charts = list(charts)
    sys.hamiltonian = H
    return sys


def _ocp_extremal_system(ocp: OptimalControlProblem, branch_rule: Optional[str] = None) -> HybridSystem:
    rule = branch_rule or ocp.branch_rule
    key = ("_extremal", rule)
    cache = ocp.__dict__.setdefault("_cache", {})
    if key not in cache:
        names = list(ocp.system.names) + [f"p_{s}" for s in ocp.system.names]
        cache[key] = extremal_system(ocp.H, ocp.system.guards, ocp.system.box, rule, ocp.system.time_dependent_guards, names)
    return cache[key]


# ---------------------------------------------------------------------------
# extremal arcs


@dataclass
class ExtremalArc:
    """Extremal (x, p) arc with control, cost and boundary residual.

    Attributes:
        arc: Hybrid arc on ``z = (x, p)`` with the running cost as quadrature.
        n: State dimension.
        cost: Accumulated cost J (running plus terminal).
        residual: Norm of the boundary-condition mismatch. For arcs with a
            closed beating event it also includes the beating mismatch.
        terminal_residual: ``p(tf) - dg(x(tf))`` or ``x(tf) - x_f``.
        beating_residual: Mismatch ``p-_actual - p-_required`` per beating event.
        status: ``completed`` or a failure label.
    """

    arc: HybridArc
    n: int
    H: Hamiltonian
    cost: float
    residual: float
    terminal_residual: Array
    beating_residual: list = field(default_factory=list)
    status: str = "completed"
    p_init: Optional[Array] = None

    def x(self, t) -> Array:
        return self.arc.x(t)[: self.n]

    def p(self, t) -> Array:
        return self.arc.x(t)[self.n :]

    def u(self, t) -> Array:
        z = self.arc.x(t)
        return np.atleast_1d(self.H.control(t, z[: self.n], z[self.n :]))

    @property
    def events(self) -> list[ResetEvent]:
        return self.arc.events

    @property
    def signature(self) -> tuple:
        return tuple(e.guard_id for e in self.arc.events)

    def trajectory(self, n_per_unit: int = 200) -> tuple[Array, Array]:
        """Resampled ``(t, x)`` with both sides of every event."""
        t, z = self.arc.dense(n_per_unit)
        return t, z[:, : self.n]


def _terminal(ocp: OptimalControlProblem, zT: Array) -> Array:
    n = ocp.n
    if ocp.x_final is not None:
        return zT[:n] - ocp.x_final
    return zT[n:] - ocp.dg(zT[:n])


def extremal_flow(
    ocp: OptimalControlProblem,
    x0,
    p_init,
    t_span=None,
    cfg: Optional[FlowConfig] = None,
    *,
    variational: bool = False,
    branch_rule: Optional[str] = None,
    close_beating: bool = True,
    _depth: int = 0,
) -> ExtremalArc:
    """Integrate the canonical equations of the optimal Hamiltonian.

    Args:
        ocp: Problem.
        x0, p_init: Initial state and costate.
        t_span: Window, defaults to the horizon.
        cfg: Flow configuration.
        variational: Also integrate the 2n x 2n transition matrix.
        branch_rule: Overrides ``ocp.branch_rule``.
        close_beating: Close constant-reset (beating) events by solving the
            post-event boundary problem; otherwise Underdetermined is raised.

    Raises:
        NoRealRoot, Tangential, TangentialCrossing, ZenoDetected, ...: from
            the lower layers, with the partial arc in ``err.arc``.
    """
    cfg = cfg or FlowConfig()
    t0, tf = t_span if t_span is not None else ocp.horizon
    n = ocp.n
    H = ocp.H
    sys = _ocp_extremal_system(ocp, branch_rule)
    z0 = np.concatenate([np.asarray(x0, dtype=float), np.asarray(p_init, dtype=float)])
    quad = lambda t, z: H.running_cost(t, z[:n], z[n:])  # noqa: E731
    salt = None
    if variational:
        salt = lambda ff, c, t, a, b: event_saltation(sys, ff, c, t, a, b, 0.0)  # noqa: E731
    try:
        arc = flow(sys, z0, (t0, tf), cfg, quadrature=quad, variational=variational, saltation=salt)
        beat_res: list = []
    except Underdetermined as err:
        if not close_beating or err.arc is None or _depth > 2:
            raise
        arc, beat_res = _close_beating(ocp, sys, err, tf, cfg, variational, branch_rule, _depth)
    zT = arc.final_state
    term = _terminal(ocp, zT)
    cost = float(arc.final_quad[0])
    if ocp.terminal_cost is not None:
        cost += float(ocp.terminal_cost(zT[:n]))
    res = float(np.linalg.norm(np.concatenate([term] + [np.atleast_1d(b) for b in beat_res])))
    return ExtremalArc(arc, n, H, cost, res, term, beat_res, arc.terminal_status, np.asarray(p_init, dtype=float))


def _close_beating(ocp, sys, err, tf, cfg, variational, branch_rule, depth):
    """Close a constant-reset event: solve for p+ and measure the p- mismatch."""
    n = ocp.n
    H = ocp.H
    pre = err.arc
    t_star = float(err.info["t"])
    z_pre = np.asarray(err.info["x"], dtype=float)
    chart = next(c for c in sys.base_charts if c.id == err.info["guard_id"])
    x_minus, p_minus = z_pre[:n], z_pre[n:]
    x_plus = np.asarray(chart.reset(t_star, x_minus), dtype=float)
    if tf - t_star <= 10 * cfg.tol_t:
        p_plus = ocp.dg(x_plus) if ocp.terminal_cost is not None else np.zeros(n)
        post = None
    else:
        table = _post_table(ocp, chart.id, x_plus, tf, cfg, branch_rule, depth)
        p_plus, post = _solve_post_multi(ocp, x_plus, table.seeds(t_star), (t_star, tf), cfg, branch_rule, depth)
    req = solve_corner_beating(H, None, chart, x_minus, p_plus, "backward", t=t_star)
    mismatch = p_minus - req.p_minus
    z_plus = np.concatenate([x_plus, p_plus])
    ev = ResetEvent(t_star, z_pre.copy(), z_plus, chart.id, 0, float("nan"))
    if post is None:
        arc = HybridArc(pre.dim, pre.segments, pre.events + [ev], "completed", pre.n_quad, False, pre.names)
        return arc, [mismatch]
    q_pre = pre.final_quad
    for seg in post.arc.segments:  # shift quadrature to continue from pre-event value
        seg.z_nodes = seg.z_nodes.copy()
        seg.z_nodes[:, 2 * n] += q_pre[0]
        seg.sol = _ShiftedSolution(seg.sol, 2 * n, q_pre[0])
    arc = HybridArc(pre.dim, pre.segments, pre.events + [ev] + post.arc.events, post.arc.terminal_status, pre.n_quad, False, pre.names)
    arc.segments = pre.segments + post.arc.segments
    return arc, [mismatch] + list(post.beating_residual)


class _ShiftedSolution:
    """Dense solution with a constant added to one component."""

    def __init__(self, sol, index, shift):
        self.sol, self.index, self.shift = sol, index, shift

    def __call__(self, s):
        z = np.array(self.sol(s), dtype=float, copy=True)
        z[self.index] += self.shift
        return z


@dataclass
class _PostTable:
    """Post-event costates p+(t*) on a grid of event times, for one reset image."""

    ts: Array
    P: Array
    base: Array

    def seeds(self, t: float) -> list[Array]:
        out = []
        if self.ts.size:
            ok = np.all(np.isfinite(self.P), axis=1)
            if np.any(ok):
                ts, P = self.ts[ok], self.P[ok]
                out.append(np.array([np.interp(t, ts, P[:, j]) for j in range(P.shape[1])]))
                i = int(np.argmin(np.abs(ts - t)))
                out.append(P[i].copy())
        out.append(self.base.copy())
        return out


# keyed by problem identity, chart, reset image, horizon end, branch rule, depth;
# a table is built completely on first use, so lookups never depend on the
# order in which extremals are evaluated
_POST_TABLES: dict = {}
_POST_NODES = 33
_POST_SEEDS = [np.array(v, dtype=float) for v in ((1.0, -1.0), (-1.0, 1.0), (1.0, 1.0), (-1.0, -1.0))]


def _post_table(ocp, chart_id, x_plus, tf, cfg, branch_rule, depth) -> _PostTable:
    n = ocp.n
    key = (id(ocp), ocp.name, chart_id, tuple(np.round(x_plus, 12)), float(tf), branch_rule, depth)
    hit = _POST_TABLES.get(key)
    if hit is not None and hit[0] is ocp:
        return hit[1]
    base = ocp.dg(x_plus) if ocp.terminal_cost is not None else np.zeros(n)
    t0 = float(ocp.horizon[0])
    ts = np.linspace(t0, tf, _POST_NODES)[:-1]
    P = np.full((ts.size, n), np.nan)
    prev = base
    for i in range(ts.size - 1, -1, -1):
        try:
            p, ea = _solve_post_multi(ocp, x_plus, [prev, base], (float(ts[i]), tf), cfg, branch_rule, depth, extra=True)
        except SolverError:
            continue
        if ea is not None and ea.residual < 1e-8:
            P[i] = p
            prev = p
    table = _PostTable(ts, P, base)
    _POST_TABLES[key] = (ocp, table)
    return table


def _solve_post_multi(ocp, x_plus, seeds, span, cfg, branch_rule, depth, extra: bool = True):
    """Post-event solve from several seeds; first clean solution wins, else the best."""
    best = None
    tried = list(seeds) + (_POST_SEEDS if extra else [])
    for g in tried:
        try:
            p, ea = _solve_post(ocp, x_plus, g, span, cfg, branch_rule, depth)
        except SolverError:
            continue
        if best is None or ea.residual < best[1].residual:
            best = (p, ea)
        if ea.residual < 1e-9:
            break
    if best is None:
        raise NoCandidate(f"post-event boundary problem from {x_plus} unsolvable on {span}")
    return best


def _solve_post(ocp, x_plus, guess, span, cfg, branch_rule, depth, tol=1e-11, max_iter=12):
    """Newton on p+ so that the post-event arc meets the terminal condition.

    The best iterate is judged by the full residual, so post arcs that only
    meet the terminal condition through an unresolved nested beating event
    lose against clean ones.
    """
    p = np.array(guess, dtype=float)
    best = None
    for _ in range(max_iter):
        ea = extremal_flow(ocp, x_plus, p, span, cfg, variational=True, branch_rule=branch_rule, _depth=depth + 1)
        r = ea.terminal_residual
        nr = float(np.linalg.norm(r))
        if best is None or ea.residual < best[2].residual:
            best = (nr, p.copy(), ea)
        if nr < tol:
            break
        J = _residual_jacobian(ocp, ea, x_plus, p, span, cfg, branch_rule, depth)
        try:
            dp = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            dp = np.linalg.lstsq(J, -r, rcond=None)[0]
        lam = 1.0
        improved = False
        for _ in range(8):
            trial = p + lam * dp
            try:
                et = extremal_flow(ocp, x_plus, trial, span, cfg, branch_rule=branch_rule, _depth=depth + 1)
            except SolverError:
                lam *= 0.5
                continue
            if np.linalg.norm(et.terminal_residual) < nr:
                p = trial
                improved = True
                break
            lam *= 0.5
        if not improved:
            break
    _, p, ea = best
    return p, ea


def _residual_jacobian(ocp, ea, x0, p, span, cfg, branch_rule, depth):
    n = ocp.n
    if ea.arc.has_phi and not ea.beating_residual:
        Phi = ea.arc.final_phi
        zT = ea.arc.final_state
        if ocp.x_final is not None:
            return Phi[:n, n:]
        d2g = fd_jacobian(ocp.dg, zT[:n]) if ocp.terminal_cost is not None else np.zeros((n, n))
        return Phi[n:, n:] - d2g @ Phi[:n, n:]
    J = np.empty((n, n))
    for j in range(n):
        d = 1e-6 * max(1.0, abs(p[j]))
        e = np.zeros(n)
        e[j] = d
        rp = extremal_flow(ocp, x0, p + e, span, cfg, branch_rule=branch_rule, _depth=depth + 1).terminal_residual
        rm = extremal_flow(ocp, x0, p - e, span, cfg, branch_rule=branch_rule, _depth=depth + 1).terminal_residual
        J[:, j] = (rp - rm) / (2 * d)
    return J


# ---------------------------------------------------------------------------
# shooting


def shooting_residual(ea: ExtremalArc) -> Array:
    """Vector residual used by Newton: beating mismatch if any, else terminal."""
    if ea.beating_residual:
        return np.concatenate([np.atleast_1d(b) for b in ea.beating_residual])
    return ea.terminal_residual


def newton_shoot(
    ocp: OptimalControlProblem,
    x0,
    p_init,
    cfg: Optional[FlowConfig] = None,
    *,
    tol: float = 1e-10,
    max_iter: int = 20,
    branch_rule: Optional[str] = None,
    keep_signature: bool = True,
) -> Optional[ExtremalArc]:
    """Damped Newton on the initial costate.

    The Jacobian comes from the extremal transition matrix on regular arcs and
    from central differences on arcs with a closed beating event. The
    iteration aborts (returns ``None``) if the event sequence changes and
    ``keep_signature`` is set, or if no step reduces the residual.
    """
    n = ocp.n
    p = np.asarray(p_init, dtype=float).copy()
    try:
        ea = extremal_flow(ocp, x0, p, cfg=cfg, variational=True, branch_rule=branch_rule)
    except SolverError:
        return None
    sig = ea.signature
    for _ in range(max_iter):
        r = shooting_residual(ea)
        nr = float(np.linalg.norm(r))
        if nr < tol:
            return ea
        if ea.beating_residual or not ea.arc.has_phi:
            J = np.empty((r.size, n))
            for j in range(n):
                d = 1e-6 * max(1.0, abs(p[j]))
                e = np.zeros(n)
                e[j] = d
                try:
                    rp = shooting_residual(extremal_flow(ocp, x0, p + e, cfg=cfg, branch_rule=branch_rule))
                    rm = shooting_residual(extremal_flow(ocp, x0, p - e, cfg=cfg, branch_rule=branch_rule))
                except SolverError:
                    return ea if nr < 1e-6 else None
                if rp.size != r.size or rm.size != r.size:
                    return ea if nr < 1e-6 else None
                J[:, j] = (rp - rm) / (2 * d)
        else:
            J = _residual_jacobian(ocp, ea, x0, p, ocp.horizon, cfg, branch_rule, 0)
        try:
            dp = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            dp = np.linalg.lstsq(J, -r, rcond=None)[0]
        lam, accepted = 1.0, False
        for _ in range(10):
            trial = p + lam * dp
            try:
                et = extremal_flow(ocp, x0, trial, cfg=cfg, variational=True, branch_rule=branch_rule)
            except SolverError:
                lam *= 0.5
                continue
            if keep_signature and et.signature != sig:
                lam *= 0.5
                continue
            if np.linalg.norm(shooting_residual(et)) < nr:
                p, ea, accepted = trial, et, True
                break
            lam *= 0.5
        if not accepted:
            return ea if nr < 1e-6 else None
    return ea if ea.residual < 1e-6 else None


@dataclass
class ShootingMesh:
    """Equidistant mesh of initial costates.

    Attributes:
        lo, hi: Box corners (per coordinate).
        N: Points per axis.
        eps_terminal: Acceptance threshold on the residual norm.
        refine: Run Newton refinement from the best mesh seeds.
        refine_seeds: Number of local residual minima used as Newton seeds.
    """

    lo: Sequence[float] = (-2.0, -2.0)
    hi: Sequence[float] = (2.0, 2.0)
    N: int = 101
    eps_terminal: float = 1e-3
    refine: bool = False
    refine_seeds: int = 8

    def points(self) -> Array:
        axes = [np.linspace(a, b, self.N) for a, b in zip(self.lo, self.hi)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)


@dataclass
class MeshResult:
    """Outcome of :func:`mesh_shoot`.

    ``table`` has one row per mesh point in mesh order:
    ``(index, p..., residual, cost, n_events, ok)``.
    """

    best: ExtremalArc
    table: Array
    candidates: list
    refined: list


_WORKER: dict = {}


def _mesh_eval(i):
    ocp, x0, P, cfg, rule = _WORKER["args"]
    try:
        ea = extremal_flow(ocp, x0, P[i], cfg=cfg, branch_rule=rule)
        return i, ea.residual, ea.cost, len(ea.events), 1
    except SolverError:
        return i, math.inf, math.inf, -1, 0


def mesh_shoot(
    ocp: OptimalControlProblem,
    x0,
    mesh: Optional[ShootingMesh] = None,
    cfg: Optional[FlowConfig] = None,
    *,
    threads: int = 1,
    branch_rule: Optional[str] = None,
) -> MeshResult:
    """Mesh shooting on the initial costate.

    Every mesh point is flowed; points with residual below ``eps_terminal``
    are candidates; the lowest-cost candidate wins (mesh order breaks ties).
    With ``refine`` the lowest-residual local minima of the mesh seed damped
    Newton iterations whose converged results join the candidate set.

    Raises:
        NoCandidate: nothing passes the filter.
    """
    mesh = mesh or ShootingMesh()
    P = mesh.points()
    _WORKER["args"] = (ocp, np.asarray(x0, dtype=float), P, cfg, branch_rule)
    idx = range(len(P))
    if threads > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(max_workers=threads, mp_context=mp.get_context("fork")) as ex:
            rows = list(ex.map(_mesh_eval, idx, chunksize=max(1, len(P) // (8 * threads))))
    else:
        rows = [_mesh_eval(i) for i in idx]
    rows.sort(key=lambda r: r[0])
    table = np.array([[r[0], *P[r[0]], r[1], r[2], r[3], r[4]] for r in rows])
    res = table[:, 1 + P.shape[1]]
    cost = table[:, 2 + P.shape[1]]
    candidates = []
    for i in np.flatnonzero(res < mesh.eps_terminal):
        candidates.append(("mesh", int(i), P[i], float(res[i]), float(cost[i]), None))
    refined = []
    if mesh.refine:
        for i in _local_minima(res, mesh.N, P.shape[1])[: mesh.refine_seeds]:
            ea = newton_shoot(ocp, x0, P[i], cfg, branch_rule=branch_rule)
            if ea is not None and ea.residual < mesh.eps_terminal:
                refined.append(ea)
                candidates.append(("refined", int(i), ea.p_init, ea.residual, ea.cost, ea))
    if not candidates:
        raise NoCandidate(f"no mesh point below eps_terminal={mesh.eps_terminal:g}")
    candidates.sort(key=lambda c: (c[4], 0 if c[0] == "mesh" else 1, c[1]))
    kind, i, p_best, _, _, ea = candidates[0]
    if ea is None:
        ea = extremal_flow(ocp, x0, p_best, cfg=cfg, branch_rule=branch_rule)
    return MeshResult(ea, table, candidates, refined)


def _local_minima(res: Array, N: int, d: int) -> list[int]:
    """Mesh indices that are finite local minima of the residual, best first."""
    R = res.reshape((N,) * d)
    out = []
    for idx in np.ndindex(*R.shape):
        v = R[idx]
        if not math.isfinite(v):
            continue
        sl = tuple(slice(max(k - 1, 0), k + 2) for k in idx)
        if v <= np.min(R[sl]):
            out.append((v, int(np.ravel_multi_index(idx, R.shape))))
    out.sort()
    return [i for _, i in out]


# ---------------------------------------------------------------------------
# Lagrangian submanifolds


def _backward_system(ocp: OptimalControlProblem, tf: float) -> HybridSystem:
    """Time-reversed extremal system (reversed time ``s = tf - t``)."""
    n = ocp.n
    H = ocp.H
    charts = []
    base = {c.id: c for c in ocp.system.guards}
    for ic in ocp.image_charts:
        c = base[ic.chart_id]

        def reset(s, z, ic=ic, c=c):
            t = tf - s
            x_post, p_post = z[:n], z[n:]
            x_pre = np.asarray(ic.inverse_reset(t, x_post), dtype=float)
            sol = solve_corner_backward(H, c, x_post, p_post, t, x_pre=x_pre)
            return np.concatenate([x_pre, sol.p_minus])

        charts.append(
            GuardChart(
                id=c.id,
                h=lambda s, z, ic=ic: ic.h(tf - s, z[:n]),
                reset=reset,
                domain=(lambda s, z, ic=ic: ic.domain(tf - s, z[:n])) if ic.domain is not None else None,
                transversal_sign=ic.transversal_sign,
            )
        )
    return HybridSystem(2 * n, lambda s, z, u=None: -H.canonical(tf - s, z), charts, None, ocp.system.time_dependent_guards)


def propagate_lagrangian(
    ocp: OptimalControlProblem,
    seed: str,
    t: float,
    samples: Array,
    x0=None,
    cfg: Optional[FlowConfig] = None,
    log: Optional[list] = None,
) -> Array:
    """Image of a seed Lagrangian submanifold under the extremal flow.

    Args:
        ocp: Problem (its optimal Hamiltonian and guards are used).
        seed: ``fiber`` (cotangent fiber at ``x0``, flowed forward from t0 by
            ``t``) or ``terminal`` (graph of dg at tf, flowed backward by ``t``).
        t: Propagation duration.
        samples: Momenta (fiber) or base points (terminal), shape (k, n).
        x0: Base point of the fiber.
        cfg: Flow configuration.
        log: Receives ``(sample index, error name)`` for skipped samples.

    Returns:
        Rows ``(index, x..., p..., n_events)``.
    """
    n = ocp.n
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    rows = []
    t0, tf = ocp.horizon
    if seed == "fiber":
        if x0 is None:
            raise ValueError("fiber seed needs x0")
        sys = _ocp_extremal_system(ocp)
        for i, p in enumerate(samples):
            z0 = np.concatenate([np.asarray(x0, dtype=float), p])
            if t == 0:
                rows.append([i, *z0, 0])
                continue
            try:
                arc = flow(sys, z0, (t0, t0 + t), cfg)
            except (SolverError, ValidationError) as err:
                if log is not None:
                    log.append((i, type(err).__name__))
                continue
            rows.append([i, *arc.final_state, len(arc.events)])
    elif seed == "terminal":
        if ocp.terminal_cost is None:
            raise ValueError("terminal seed needs a terminal cost")
        sys = _backward_system(ocp, tf)
        for i, x in enumerate(samples):
            z0 = np.concatenate([x, ocp.dg(x)])
            if t == 0:
                rows.append([i, *z0, 0])
                continue
            try:
                arc = flow(sys, z0, (0.0, t), cfg)
            except (SolverError, ValidationError) as err:
                if log is not None:
                    log.append((i, type(err).__name__))
                continue
            rows.append([i, *arc.final_state, len(arc.events)])
    else:
        raise ValueError(f"unknown seed {seed!r}")
    return np.array(rows) if rows else np.zeros((0, 2 * n + 2))


def intersect_clouds(A: Array, B: Array, tol: float) -> list[tuple[int, int, float]]:
    """Nearest-neighbour pairs ``(i, j, dist)`` within ``tol`` (sup metric)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        return []
    d, j = cKDTree(B).query(A, k=1, p=np.inf, distance_upper_bound=tol)
    return [(int(i), int(j[i]), float(d[i])) for i in range(len(A)) if np.isfinite(d[i]) and d[i] <= tol]
