"""Hybrid systems, event-driven flows and Zeno diagnosis.

A :class:`HybridSystem` is a vector field on R^n together with an ordered list
of :class:`GuardChart` objects. Each chart fires when ``sign * h`` crosses zero
from below inside its domain; the reset is then applied, repeatedly if the
image lands on a guard again (beating).

Flows are integrated with scipy's RK45 and its dense output. Every flow
segment (the stretch between two resets) restarts the integrator at *local*
time zero. Root finding and time differences are then carried out relative
to the segment length, which keeps event times and pre-impact states accurate
to a few ulps of the segment scale even when inter-event gaps shrink to
1e-12 next to an accumulation point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import RK45, OdeSolution
from scipy.optimize import brentq

from .errors import (
    BlockingDetected,
    EscapedDomain,
    SolverError,
    TangentialCrossing,
    ValidationError,
    ZenoDetected,
)

__all__ = [
    "FlowConfig",
    "GuardChart",
    "HybridSystem",
    "ResetEvent",
    "Segment",
    "HybridArc",
    "flow",
    "locate_crossing",
    "apply_reset",
    "classify_zeno",
    "guard_gradient",
    "reset_jacobian",
    "fd_jacobian",
]

Array = np.ndarray


@dataclass(frozen=True)
class FlowConfig:
    """Integrator and event settings.

    Attributes:
        rtol, atol: RK45 tolerances.
        tol_event: Bound on ``|h(x_pre)|`` at a localized crossing.
        tol_t: Time tolerance of the crossing bracket.
        tol_transversal: Grazing threshold on the oriented rate ``sign * dh/dt``.
            It is applied relative to the local rate scale of the guard
            function in the step that contains the crossing; for O(1) scales
            this is the absolute threshold.
        max_beats: Maximum number of extra instantaneous resets.
        zeno_window: Consecutive shrinking gaps needed to declare Zeno.
        zeno_ratio: Upper bound on each gap ratio in the window.
        tol_zeno: Gap floor: a gap below it after a few shrinking gaps also
            counts as Zeno (strong contraction reaches the floor before a
            full window has been seen).
        detect_zeno: Raise :class:`ZenoDetected` when the ratio test fires.
        samples_per_step: Interior dense-output samples scanned per step.
        max_step: Largest RK step.
        max_events: Hard cap on logged events.
    """

    rtol: float = 1e-9
    atol: float = 1e-11
    tol_event: float = 1e-10
    tol_t: float = 1e-12
    tol_transversal: float = 1e-8
    max_beats: int = 16
    zeno_window: int = 32
    zeno_ratio: float = 0.999
    tol_zeno: float = 1e-9
    detect_zeno: bool = True
    samples_per_step: int = 8
    max_step: float = math.inf
    max_events: int = 100_000

    def with_(self, **kw) -> "FlowConfig":
        return replace(self, **kw)


@dataclass
class GuardChart:
    """One guard chart ``{h = 0}`` with its reset.

    ``h`` and ``domain`` take ``(t, x)``. ``h`` must accept a state matrix of
    shape (n, k) with a time vector of shape (k,) and return shape (k,); the
    usual ``x[0] - 1.0`` style expressions do this for free.

    Attributes:
        id: Label written to event logs.
        h: Guard function.
        reset: Reset map ``(t, x) -> x_post``.
        domain: Predicate selecting which zeros count. ``None`` means all.
        transversal_sign: +1 fires on increasing ``h``, -1 on decreasing.
        grad: Optional ``dh/dx``; central differences otherwise.
        dh_dt: Optional ``dh/dt`` for time-dependent guards.
        jacobian: Optional reset Jacobian ``dDelta/dx``.
        reset_dt: Optional ``dDelta/dt`` for time-dependent resets.
    """

    id: str
    h: Callable[[float, Array], float]
    reset: Callable[[float, Array], Array]
    domain: Optional[Callable[[float, Array], bool]] = None
    transversal_sign: int = 1
    grad: Optional[Callable[[float, Array], Array]] = None
    dh_dt: Optional[Callable[[float, Array], float]] = None
    jacobian: Optional[Callable[[float, Array], Array]] = None
    reset_dt: Optional[Callable[[float, Array], Array]] = None

    def g(self, t, x):
        """Oriented guard value, negative before firing."""
        return self.transversal_sign * self.h(t, x)

    def contains(self, t: float, x: Array) -> bool:
        return True if self.domain is None else bool(self.domain(t, x))


@dataclass
class HybridSystem:
    """Continuous field plus ordered guard charts.

    Attributes:
        dim: State dimension.
        field: ``f(t, x, u)``; ``u`` is ``None`` for autonomous systems.
        guards: Charts in priority order (earlier wins ties).
        box: ``(lo, hi)`` state bounds; leaving them raises EscapedDomain.
        time_dependent_guards: Guards or resets depend on t.
        names: State component names used in CSV headers.
        jacobian: Optional ``df/dx(t, x, u)``.
    """

    dim: int
    field: Callable
    guards: list[GuardChart] = field(default_factory=list)
    box: Optional[tuple[Array, Array]] = None
    time_dependent_guards: bool = False
    names: Optional[list[str]] = None
    jacobian: Optional[Callable] = None

    def __post_init__(self):
        if self.names is None:
            self.names = [f"x{i + 1}" for i in range(self.dim)]
        if self.box is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in self.box)
            self.box = (lo, hi)

    def chart(self, guard_id: str) -> GuardChart:
        for c in self.guards:
            if c.id == guard_id:
                return c
        raise KeyError(guard_id)

    def in_box(self, x: Array, slack: float = 1e-9) -> bool:
        if self.box is None:
            return True
        lo, hi = self.box
        return bool(np.all(x >= lo - slack) and np.all(x <= hi + slack))


@dataclass
class ResetEvent:
    """One application of a reset map.

    A beating chain at a single instant produces consecutive events with the
    same ``t`` and ``beat_count`` 0, 1, 2, ...
    """

    t: float
    x_pre: Array
    x_post: Array
    guard_id: str
    beat_count: int
    transversality: float


@dataclass
class Segment:
    """Flow between two resets, stored in local time ``s = t - t_start``."""

    t_start: float
    t_end: float
    sol: OdeSolution
    t_local: Array  # accepted step boundaries (local time)
    z_nodes: Array  # augmented states at those boundaries, shape (k, m)

    def z(self, t):
        s = np.clip(np.asarray(t, dtype=float) - self.t_start, 0.0, self.t_end - self.t_start)
        return self.sol(s)


@dataclass
class HybridArc:
    """Piecewise trajectory with its event log.

    The stored state is augmented: ``[x, q, vec(Phi)]`` where ``q`` is an
    optional running quadrature and ``Phi`` an optional n x n transition
    matrix (row-major).
    """

    dim: int
    segments: list[Segment]
    events: list[ResetEvent]
    terminal_status: str = "completed"
    n_quad: int = 0
    has_phi: bool = False
    names: Optional[list[str]] = None

    @property
    def t0(self) -> float:
        return self.segments[0].t_start

    @property
    def t1(self) -> float:
        return self.segments[-1].t_end

    def _segment_index(self, t: float, side: str = "right") -> int:
        starts = np.array([s.t_start for s in self.segments])
        if side == "left":
            i = int(np.searchsorted(starts, t, side="left")) - 1
        else:
            i = int(np.searchsorted(starts, t, side="right")) - 1
        return min(max(i, 0), len(self.segments) - 1)

    def z(self, t: float, side: str = "right") -> Array:
        """Augmented state at time t (post-reset value at event times)."""
        return self.segments[self._segment_index(t, side)].z(t)

    def x(self, t: float, side: str = "right") -> Array:
        return self.z(t, side)[: self.dim]

    def quad(self, t: float, side: str = "right") -> Array:
        return self.z(t, side)[self.dim : self.dim + self.n_quad]

    def phi(self, t: float, side: str = "right") -> Array:
        if not self.has_phi:
            raise ValueError("arc was integrated without the variational equation")
        k = self.dim + self.n_quad
        return self.z(t, side)[k:].reshape(self.dim, self.dim)

    def sample(self, ts: Sequence[float]) -> Array:
        """States at the given times, shape (len(ts), dim)."""
        return np.array([self.x(t) for t in ts])

    @property
    def final_z(self) -> Array:
        return self.segments[-1].z(self.t1)

    @property
    def final_state(self) -> Array:
        return self.final_z[: self.dim]

    @property
    def final_quad(self) -> Array:
        return self.final_z[self.dim : self.dim + self.n_quad]

    @property
    def final_phi(self) -> Array:
        return self.phi(self.t1, side="left") if self.has_phi else None

    @property
    def event_times(self) -> Array:
        return np.array([e.t for e in self.events])

    def nodes(self) -> tuple[Array, Array]:
        """Accepted-step nodes ``(t, x)`` of all segments, in time order.

        Event instants appear twice (pre- and post-reset values).
        """
        ts, xs = [], []
        for seg in self.segments:
            ts.append(seg.t_start + seg.t_local)
            xs.append(seg.z_nodes[:, : self.dim])
        return np.concatenate(ts), np.concatenate(xs)

    def dense(self, n_per_unit: int = 200) -> tuple[Array, Array]:
        """Uniformly resampled ``(t, x)`` including both sides of every event."""
        ts, xs = [], []
        for seg in self.segments:
            k = max(2, int(math.ceil((seg.t_end - seg.t_start) * n_per_unit)) + 1)
            tt = np.linspace(seg.t_start, seg.t_end, k)
            zz = seg.sol(tt - seg.t_start)
            ts.append(tt)
            xs.append(zz[: self.dim].T)
        return np.concatenate(ts), np.concatenate(xs)

    def extended(self, other: "HybridArc") -> "HybridArc":
        """Concatenate ``other`` (which must start where this arc ends)."""
        return HybridArc(
            self.dim,
            self.segments + other.segments,
            self.events + other.events,
            other.terminal_status,
            self.n_quad,
            self.has_phi and other.has_phi,
            self.names,
        )


# ---------------------------------------------------------------------------
# derivatives


def fd_jacobian(fun: Callable[[Array], Array], x: Array, rel: float = 1e-6) -> Array:
    """Central-difference Jacobian of ``fun`` at ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fun(x))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        d = rel * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = d
        J[:, j] = (np.atleast_1d(fun(x + e)) - np.atleast_1d(fun(x - e))) / (2 * d)
    return J


def guard_gradient(chart: GuardChart, t: float, x: Array) -> Array:
    """``dh/dx`` at (t, x)."""
    if chart.grad is not None:
        return np.asarray(chart.grad(t, x), dtype=float)
    return fd_jacobian(lambda y: float(chart.h(t, y)), x)[0]


def guard_time_derivative(chart: GuardChart, t: float, x: Array) -> float:
    if chart.dh_dt is not None:
        return float(chart.dh_dt(t, x))
    d = 1e-6 * max(1.0, abs(t))
    return (float(chart.h(t + d, x)) - float(chart.h(t - d, x))) / (2 * d)


def reset_jacobian(chart: GuardChart, t: float, x: Array) -> Array:
    """``dDelta/dx`` at (t, x); only its action on guard tangents is used."""
    if chart.jacobian is not None:
        return np.asarray(chart.jacobian(t, x), dtype=float)
    return fd_jacobian(lambda y: chart.reset(t, y), x)


def _oriented_rate(chart: GuardChart, t: float, x: Array, f: Array, time_dep: bool) -> float:
    rate = float(guard_gradient(chart, t, x) @ f)
    if time_dep:
        rate += guard_time_derivative(chart, t, x)
    return chart.transversal_sign * rate


# ---------------------------------------------------------------------------
# events


def locate_crossing(
    interp: Callable[[float], Array],
    chart: GuardChart,
    s_grid: Array,
    t_offset: float = 0.0,
    cfg: FlowConfig = FlowConfig(),
    dim: Optional[int] = None,
    g_values: Optional[Array] = None,
):
    """Earliest firing root of a chart along a dense interpolant.

    Args:
        interp: Dense output in local time, ``s -> z``.
        chart: Guard chart to test.
        s_grid: Increasing local sample times covering the step.
        t_offset: Absolute time of local time zero.
        cfg: Event tolerances.
        dim: Number of leading state components passed to the chart.
        g_values: Precomputed oriented guard values on ``s_grid``.

    Returns:
        ``(t*, x*, s*)`` with ``|h(t*, x*)| <= tol_event`` or ``None``.
    """
    s_grid = np.asarray(s_grid, dtype=float)
    if g_values is None:
        Z = interp(s_grid)
        X = Z[:dim] if dim is not None else Z
        g_values = np.asarray(chart.g(t_offset + s_grid, X), dtype=float)

    def gfun(s):
        z = interp(s)
        x = z[:dim] if dim is not None else z
        return float(chart.g(t_offset + s, x))

    for i in range(1, len(s_grid)):
        if not (g_values[i - 1] < 0.0 <= g_values[i]):
            continue
        a, b = s_grid[i - 1], s_grid[i]
        if g_values[i] == 0.0:
            s_star = b
        else:
            # xtol far below tol_t: precision is then set by the local scale
            s_star = brentq(gfun, a, b, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=200)
        z = interp(s_star)
        x = z[:dim] if dim is not None else z
        if abs(chart.h(t_offset + s_star, x)) > cfg.tol_event:
            # push to the firing side until |h| is within tolerance
            s_star = _tighten(gfun, a, b, s_star, cfg)
            z = interp(s_star)
            x = z[:dim] if dim is not None else z
        if chart.contains(t_offset + s_star, x):
            return t_offset + s_star, np.array(x, dtype=float), s_star
    return None


def _tighten(gfun, a, b, s, cfg):
    lo, hi = a, b
    for _ in range(200):
        m = 0.5 * (lo + hi)
        if gfun(m) < 0:
            lo = m
        else:
            hi = m
        if hi - lo <= cfg.tol_t * 1e-3 or abs(gfun(hi)) <= cfg.tol_event:
            break
    return hi


def _fires(chart: GuardChart, system: HybridSystem, t: float, x: Array, fieldfun, cfg: FlowConfig) -> bool:
    """Whether ``chart`` fires at a freshly reset state (re-fire rule)."""
    g = float(chart.g(t, x))
    if g < -cfg.tol_event or not chart.contains(t, x):
        return False
    if g > cfg.tol_event:
        return True
    rate = _oriented_rate(chart, t, x, fieldfun(t, x), system.time_dependent_guards)
    return rate > 0.0


def apply_reset(
    system: HybridSystem,
    chart: GuardChart,
    t: float,
    x_pre: Array,
    cfg: FlowConfig = FlowConfig(),
    fieldfun=None,
    first_rate: float = float("nan"),
):
    """Apply a reset, re-firing while the image lands on a guard.

    Returns:
        ``(x_post, beat_count, chain)`` where ``chain`` lists the
        :class:`ResetEvent` of every application.

    Raises:
        BlockingDetected: more than ``max_beats`` re-fires.
    """
    if fieldfun is None:
        fieldfun = lambda tt, xx: np.asarray(system.field(tt, xx, None), dtype=float)  # noqa: E731
    chain = []
    x = np.asarray(x_pre, dtype=float)
    current = chart
    rate = first_rate
    for beat in range(cfg.max_beats + 1):
        x_new = np.asarray(current.reset(t, x), dtype=float)
        chain.append(ResetEvent(t, x.copy(), x_new.copy(), current.id, beat, rate))
        nxt = None
        for c in system.guards:
            if _fires(c, system, t, x_new, fieldfun, cfg):
                nxt = c
                break
        if nxt is None:
            return x_new, beat, chain
        x, current = x_new, nxt
        rate = _oriented_rate(current, t, x, fieldfun(t, x), system.time_dependent_guards)
    raise BlockingDetected(
        f"reset re-fired more than max_beats={cfg.max_beats} times at t={t:.17g}",
        chain=chain,
    )


# ---------------------------------------------------------------------------
# flow


def _zeno_check(times: list[float], cfg: FlowConfig):
    """Ratio test on distinct event times; returns (t_zeno, ratio) or None."""
    w = cfg.zeno_window
    if len(times) >= 5 and times[-1] - times[-2] < cfg.tol_zeno:
        w = min(w, 3)
    if len(times) < w + 2:
        return None
    tt = np.array(times[-(w + 2) :])
    gaps = np.diff(tt)
    if np.any(gaps <= 0):
        return None
    ratios = gaps[1:] / gaps[:-1]
    if np.all(ratios <= cfg.zeno_ratio):
        r = float(ratios[-1])
        return float(tt[-1] + gaps[-1] * r / (1.0 - r)), r
    return None


def flow(
    system: HybridSystem,
    x0,
    t_span,
    cfg: Optional[FlowConfig] = None,
    *,
    control: Optional[Callable[[float, Array], Array]] = None,
    quadrature: Optional[Callable[[float, Array], float]] = None,
    variational: bool = False,
    jacobian: Optional[Callable[[float, Array], Array]] = None,
    saltation: Optional[Callable] = None,
) -> HybridArc:
    """Integrate the hybrid system from ``x0`` over ``t_span``.

    Args:
        system: Hybrid system.
        x0: Initial state, off every guard (or on a guard with inward flow).
        t_span: ``(t0, t1)`` with finite ``t1 > t0``.
        cfg: Integrator settings.
        control: Feedback ``u(t, x)`` passed to the field.
        quadrature: Running integrand accumulated alongside the state.
        variational: Also integrate ``Phi' = A Phi`` (state transition matrix).
        jacobian: ``A(t, x)``; central differences of the field if omitted.
        saltation: ``(fieldfun, chart, t, x_pre, x_post) -> S`` applied to Phi
            at every reset application. Required when ``variational``.

    Returns:
        HybridArc with status ``completed``.

    Raises:
        TangentialCrossing, ZenoDetected, BlockingDetected, EscapedDomain:
            with the partial arc attached as ``err.arc``.
    """
    cfg = cfg or FlowConfig()
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not (math.isfinite(t0) and math.isfinite(t1)) or t1 <= t0:
        raise ValidationError(f"invalid t_span {t_span!r}")
    n = system.dim
    x0 = np.asarray(x0, dtype=float).reshape(n)
    if variational and saltation is None:
        raise ValueError("variational flows need a saltation callback")

    def fieldfun(t, x):
        u = control(t, x) if control is not None else None
        return np.asarray(system.field(t, x, u), dtype=float)

    if variational and jacobian is None:
        if system.jacobian is not None:
            if control is None:
                jacobian = lambda t, x: np.asarray(system.jacobian(t, x, None))  # noqa: E731
            else:
                jacobian = lambda t, x: fd_jacobian(lambda y: fieldfun(t, y), x)  # noqa: E731
        else:
            jacobian = lambda t, x: fd_jacobian(lambda y: fieldfun(t, y), x)  # noqa: E731

    nq = 1 if quadrature is not None else 0

    def aug_rhs(t_abs, z):
        x = z[:n]
        out = [fieldfun(t_abs, x)]
        if nq:
            out.append(np.atleast_1d(quadrature(t_abs, x)))
        if variational:
            P = z[n + nq :].reshape(n, n)
            out.append((jacobian(t_abs, x) @ P).ravel())
        return np.concatenate(out)

    # initial guard check
    for c in system.guards:
        g = float(c.g(t0, x0))
        if abs(g) <= cfg.tol_event and c.contains(t0, x0):
            rate = _oriented_rate(c, t0, x0, fieldfun(t0, x0), system.time_dependent_guards)
            if rate > 0:
                raise ValidationError(f"x0 lies on guard {c.id!r} with outward flow")

    z = np.concatenate([x0, np.zeros(nq), np.eye(n).ravel() if variational else []])
    segments: list[Segment] = []
    events: list[ResetEvent] = []
    distinct_times: list[float] = [t0]
    t_start = t0
    first_segment = True

    def partial(status):
        return HybridArc(n, list(segments), list(events), status, nq, variational, system.names)

    while True:
        seg_len = t1 - t_start
        offset = t_start
        rhs = lambda s, zz: aug_rhs(offset + s, zz)  # noqa: E731
        solver = RK45(rhs, 0.0, z, seg_len, rtol=cfg.rtol, atol=cfg.atol, max_step=cfg.max_step)
        t_local = [0.0]
        nodes = [z.copy()]
        interps = []
        hit = None
        first_step = True
        while solver.status == "running":
            msg = solver.step()
            if solver.status == "failed":
                raise SolverError(f"integrator failed: {msg}", arc=partial("failed"))
            s_old, s_new = solver.t_old, solver.t
            dense = solver.dense_output()
            k = cfg.samples_per_step
            s_grid = np.linspace(s_old, s_new, k + 2)
            if first_step and not first_segment:
                # resolve flights much shorter than the first step
                geo = s_old + (s_new - s_old) * np.exp2(-np.arange(60, 0, -1.0))
                s_grid = np.unique(np.concatenate([[s_old], geo, s_grid]))
            first_step = False
            Z = dense(s_grid)
            X = Z[:n]
            best = None
            for ci, c in enumerate(system.guards):
                gv = np.asarray(c.g(offset + s_grid, X), dtype=float)
                if not np.any(gv >= 0):
                    continue
                r = locate_crossing(dense, c, s_grid, offset, cfg, dim=n, g_values=gv)
                if r is None:
                    continue
                if best is None or r[2] < best[0][2] - cfg.tol_t:
                    best = (r, c, s_grid, gv)
            if system.box is not None:
                limit = best[0][2] if best is not None else s_new
                lo, hi = system.box
                bad = np.any((X < lo[:, None] - 1e-9) | (X > hi[:, None] + 1e-9), axis=0) & (s_grid <= limit)
                if np.any(bad):
                    j = int(np.argmax(bad))
                    seg_end = s_grid[max(j - 1, 0)]
                    _close_segment(segments, offset, seg_end, t_local, nodes, interps, dense, s_old)
                    raise EscapedDomain(
                        f"state left the box at t={offset + s_grid[j]:.17g}",
                        arc=partial("escaped_domain"),
                    )
            if best is not None:
                (t_star, x_star, s_star), chart, sg, gv = best
                hit = (t_star, x_star, s_star, chart, sg, gv)
                interps.append(dense)
                t_local.append(s_star)
                nodes.append(dense(s_star))
                break
            interps.append(dense)
            t_local.append(s_new)
            nodes.append(solver.y.copy())

        seg = Segment(offset, offset + t_local[-1], OdeSolution(np.array(t_local), interps), np.array(t_local), np.array(nodes))
        if hit is None:
            seg.t_end = t1
            segments.append(seg)
            return HybridArc(n, segments, events, "completed", nq, variational, system.names)
        segments.append(seg)
        t_star, x_star, s_star, chart, sg, gv = hit
        seg.t_end = t_star
        f_pre = fieldfun(t_star, x_star)
        rate = _oriented_rate(chart, t_star, x_star, f_pre, system.time_dependent_guards)
        # local rate scale of the oriented guard function in this step
        slopes = np.abs(np.diff(gv) / np.diff(sg))
        scale = float(np.max(slopes)) if slopes.size else abs(rate)
        scale = max(scale, abs(rate), np.finfo(float).tiny)
        if rate <= 0.0 or abs(rate) < cfg.tol_transversal * scale:
            raise TangentialCrossing(
                f"grazing crossing of guard {chart.id!r} at t={t_star:.17g} (rate {rate:.3g})",
                arc=partial("tangential"),
                t=t_star,
                x=x_star,
                guard_id=chart.id,
            )
        z_pre = nodes[-1]
        try:
            x_post, beats, chain = apply_reset(system, chart, t_star, x_star, cfg, fieldfun, rate)
        except SolverError as err:
            err.arc = partial(type(err).__name__)
            err.info.update(t=t_star, x=x_star, guard_id=chart.id, z_pre=z_pre)
            raise
        events.extend(chain)
        if len(events) > cfg.max_events:
            raise SolverError("max_events exceeded", arc=partial("max_events"))
        z = np.concatenate([x_post, z_pre[n : n + nq]])
        if variational:
            P = z_pre[n + nq :].reshape(n, n)
            for ev in chain:
                S = saltation(fieldfun, system.chart(ev.guard_id), t_star, ev.x_pre, ev.x_post)
                P = S @ P
            z = np.concatenate([z, P.ravel()])
        if t_star > distinct_times[-1]:
            distinct_times.append(t_star)
        if not system.in_box(x_post):
            raise EscapedDomain(f"reset image left the box at t={t_star:.17g}", arc=partial("escaped_domain"))
        if cfg.detect_zeno:
            zc = _zeno_check(distinct_times[1:], cfg)
            if zc is not None and zc[0] < t1:
                raise ZenoDetected(
                    f"Zeno accumulation at t~{zc[0]:.17g} (gap ratio {zc[1]:.6g})",
                    arc=partial("zeno_detected"),
                    t_zeno=zc[0],
                    ratio=zc[1],
                )
        if t_star >= t1:
            return HybridArc(n, segments, events, "completed", nq, variational, system.names)
        t_start = t_star
        first_segment = False


def _close_segment(segments, offset, s_end, t_local, nodes, interps, dense, s_old):
    if s_end > s_old:
        interps.append(dense)
        t_local.append(s_end)
        nodes.append(dense(s_end))
    if len(t_local) >= 2:
        segments.append(
            Segment(offset, offset + t_local[-1], OdeSolution(np.array(t_local), interps), np.array(t_local), np.array(nodes))
        )


# ---------------------------------------------------------------------------
# Zeno classification


def classify_zeno(arc: HybridArc, box=None, window: int = 32, ratio: float = 0.999) -> str:
    """Classify an arc's event sequence as ``steady``, ``spasmodic`` or ``none``.

    ``steady``: the last ``window`` gap ratios are all at most ``ratio`` and the
    event states stay in ``box``. ``spasmodic``: gaps shrink but event-state
    norms grow without bound (each of the last ``window`` events lies farther
    out than the previous one and the last ones leave ``box``).
    """
    times = []
    states = []
    for e in arc.events:
        if not times or e.t > times[-1]:
            times.append(e.t)
            states.append(e.x_pre)
    if len(times) < window + 1:
        return "none"
    tt = np.array(times[-(window + 1) :])
    gaps = np.diff(tt)
    if np.any(gaps <= 0):
        return "none"
    ratios = gaps[1:] / gaps[:-1]
    if not np.all(ratios <= ratio):
        return "none"
    xs = np.array(states[-(window + 1) :])
    if box is None:
        return "steady"
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    inside = np.all((xs >= lo) & (xs <= hi), axis=1)
    if np.all(inside):
        return "steady"
    norms = np.linalg.norm(xs, axis=1)
    if np.all(np.diff(norms) > 0) and not inside[-1]:
        return "spasmodic"
    return "none"
