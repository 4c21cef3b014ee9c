"""Backward dynamic programming for hybrid optimal control on a state grid.

One explicit Euler step per time slice; a step that crosses a guard is split
at the (secant) crossing, the reset is applied and the remainder of the step
is accounted for after the reset. Values off the grid come from multilinear
interpolation.

The dynamics and running cost are taken to be autonomous, so for every
(node, control) pair the Euler end point, the crossing fraction, the reset
image and its interpolation stencil are computed once and reused by every
slice. A slice then costs a few gathers and a minimum over controls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import GridTooCoarse, OutOfGrid, ValidationError
from .hpmp import OptimalControlProblem
from .hybrid_core import FlowConfig, HybridArc, flow

__all__ = [
    "DPGrid",
    "ValueGrid",
    "multilinear",
    "solve_dp",
    "extract_policy",
    "closed_loop",
    "ClosedLoopResult",
]

Array = np.ndarray


@dataclass
class DPGrid:
    """Discretization of state, control and time.

    Attributes:
        lo, hi: State box corners.
        n_nodes: Nodes per state axis (both ends included).
        n_controls: Control samples on ``control_range``.
        n_steps: Time steps on the horizon (``n_steps + 1`` slices).
        control_range: ``(u_min, u_max)``; defaults to ``ocp.dp_controls``.
        max_cfl: Largest admissible Euler step, in cell diagonals.
        reset_mode: ``"extrapolate"`` evaluates the value at the crossing time
            by linear extrapolation in time; ``"continue"`` integrates the rest
            of the step from the reset image with the same control.
    """

    lo: Sequence[float]
    hi: Sequence[float]
    n_nodes: Sequence[int] | int = 150
    n_controls: int = 150
    n_steps: int = 250
    control_range: Optional[tuple[float, float]] = None
    max_cfl: float = 2.0
    reset_mode: str = "extrapolate"

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        d = self.lo.size
        nn = np.atleast_1d(self.n_nodes).astype(int)
        self.n_nodes = tuple(int(k) for k in (np.repeat(nn, d) if nn.size == 1 else nn))
        if len(self.n_nodes) != d or min(self.n_nodes) < 2:
            raise ValidationError("need at least two nodes per state axis")
        if np.any(self.hi <= self.lo):
            raise ValidationError("empty state box")
        if self.n_controls < 1 or self.n_steps < 1:
            raise ValidationError("need at least one control sample and one time step")
        if self.reset_mode not in ("extrapolate", "continue"):
            raise ValidationError(f"unknown reset_mode {self.reset_mode!r}")

    @classmethod
    def table1(cls, **kw) -> "DPGrid":
        """The neuron discretization: 150 x 150 nodes on [0, 1]^2, 150 controls, 250 steps."""
        args = dict(lo=(0.0, 0.0), hi=(1.0, 1.0), n_nodes=150, n_controls=150, n_steps=250)
        args.update(kw)
        return cls(**args)

    @property
    def axes(self) -> list[Array]:
        return [np.linspace(a, b, k) for a, b, k in zip(self.lo, self.hi, self.n_nodes)]

    @property
    def spacing(self) -> Array:
        return (self.hi - self.lo) / (np.array(self.n_nodes) - 1)


@dataclass
class ValueGrid:
    """Value function and policy on the grid.

    Attributes:
        axes: Node coordinates per state axis.
        times: Slice times ``t_0 < ... < t_K``.
        values: ``V[k]`` with shape ``(K + 1, *n_nodes)``.
        policy: Minimizing control on slices ``0..K-1``, shape ``(K, *n_nodes)``.
        controls: Control samples, smallest ``|u|`` first.
        clamped: Fraction of interpolation queries clamped to the box.
        flagged: Number of non-finite values replaced by the largest finite one.
        model: Model name of the problem.
    """

    axes: list[Array]
    times: Array
    values: Array
    policy: Array
    controls: Array
    clamped: float = 0.0
    flagged: int = 0
    model: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def lo(self) -> Array:
        return np.array([a[0] for a in self.axes])

    @property
    def hi(self) -> Array:
        return np.array([a[-1] for a in self.axes])

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    def slice_index(self, t: float) -> int:
        """Index k of the step ``[t_k, t_{k+1})`` containing t."""
        K = self.times.size - 1
        dt = (self.times[-1] - self.times[0]) / K
        k = int(math.floor((t - self.times[0]) / dt + 1e-9))
        return min(max(k, 0), K - 1)

    def value(self, t: float, x) -> float:
        """Interpolated ``V(t, x)``, linear in time between slices."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        K = self.times.size - 1
        s = (t - self.times[0]) / (self.times[-1] - self.times[0]) * K
        k = min(max(int(math.floor(s)), 0), K - 1)
        a = min(max(s - k, 0.0), 1.0)
        v0 = multilinear(self.values[k], self.axes, x[:, None])[0]
        v1 = multilinear(self.values[k + 1], self.axes, x[:, None])[0]
        return float((1 - a) * v0 + a * v1)


def _stencil(axes: list[Array], Y: Array):
    """Corner indices and weights of the multilinear stencil at points ``Y``.

    Args:
        axes: Uniform node coordinates per axis.
        Y: Query points, shape ``(d, M)``; clamped to the box.

    Returns:
        ``(flat_idx, weights, n_clamped)`` with shapes ``(2^d, M)``.
    """
    d, M = Y.shape
    shape = tuple(a.size for a in axes)
    base = np.zeros(M, dtype=np.int64)
    frac = []
    lower = []
    n_clamped = 0
    for j, a in enumerate(axes):
        h = (a[-1] - a[0]) / (a.size - 1)
        s = (Y[j] - a[0]) / h
        out = (s < -1e-9) | (s > a.size - 1 + 1e-9)
        n_clamped += int(np.count_nonzero(out))
        s = np.clip(s, 0.0, a.size - 1)
        i = np.minimum(np.floor(s).astype(np.int64), a.size - 2)
        lower.append(i)
        frac.append(s - i)
    strides = np.cumprod((1,) + shape[::-1])[::-1][1:]
    for j in range(d):
        base += lower[j] * strides[j]
    idx = np.empty((2**d, M), dtype=np.int64)
    w = np.empty((2**d, M))
    for c in range(2**d):
        off = 0
        wc = np.ones(M)
        for j in range(d):
            bit = (c >> (d - 1 - j)) & 1
            off += bit * strides[j]
            wc = wc * (frac[j] if bit else 1.0 - frac[j])
        idx[c] = base + off
        w[c] = wc
    return idx, w, n_clamped


def multilinear(values: Array, axes: list[Array], Y: Array) -> Array:
    """Multilinear interpolation of node ``values`` at points ``Y`` (shape ``(d, M)``).

    Points outside the box are clamped to it.
    """
    idx, w, _ = _stencil(axes, np.atleast_2d(np.asarray(Y, dtype=float)))
    flat = np.asarray(values).ravel()
    return np.einsum("cm,cm->m", w, flat[idx])


def _controls(ocp: OptimalControlProblem, grid: DPGrid) -> Array:
    rng = grid.control_range or getattr(ocp, "dp_controls", None)
    if rng is None:
        if ocp.control_bounds is None:
            raise ValidationError("DP needs a control range (grid.control_range or bounded controls)")
        rng = (float(ocp.control_bounds[0][0]), float(ocp.control_bounds[1][0]))
    u = np.linspace(rng[0], rng[1], grid.n_controls)
    return u[np.argsort(np.abs(u), kind="stable")]


def _batch_field(ocp, X, u):
    sysm = ocp.system
    U = np.full(X.shape[1], u)
    if hasattr(sysm, "field_batch"):
        return np.asarray(sysm.field_batch(X, U), dtype=float)
    return np.array([sysm.field(0.0, X[:, i], np.array([u])) for i in range(X.shape[1])]).T


def _batch_cost(ocp, X, u):
    U = np.full(X.shape[1], u)
    if hasattr(ocp, "cost_batch"):
        return np.asarray(ocp.cost_batch(X, U), dtype=float)
    return np.array([ocp.running_cost(0.0, X[:, i], np.array([u])) for i in range(X.shape[1])])


def _crossings(ocp, X, X1):
    """Earliest firing guard along each Euler segment ``X -> X1``.

    Returns ``(theta, chart_index)`` with ``theta = inf`` where nothing fires;
    chart order breaks ties.
    """
    M = X.shape[1]
    theta = np.full(M, np.inf)
    which = np.full(M, -1)
    for ci, ch in enumerate(ocp.system.guards):
        g0 = ch.transversal_sign * np.asarray(ch.h(0.0, X), dtype=float)
        g1 = ch.transversal_sign * np.asarray(ch.h(0.0, X1), dtype=float)
        fire = (g0 <= 0.0) & (g1 > 0.0)
        if not np.any(fire):
            continue
        th = np.where(fire, -g0 / np.where(fire, g1 - g0, 1.0), np.inf)
        Xc = X + np.clip(th, 0.0, 1.0) * (X1 - X)
        if ch.domain is not None:
            fire &= np.asarray(ch.domain(0.0, Xc), dtype=bool)
        th = np.where(fire, th, np.inf)
        better = th < theta
        theta = np.where(better, th, theta)
        which = np.where(better, ci, which)
    return theta, which


def solve_dp(ocp: OptimalControlProblem, grid: DPGrid) -> ValueGrid:
    """Backward induction ``V_k = min_u [l dt + V_{k+1}(next)]``.

    Raises:
        GridTooCoarse: when an Euler step exceeds ``grid.max_cfl`` cell diagonals.
        ValidationError: time-dependent guards or a grid/model mismatch.
    """
    sysm = ocp.system
    if sysm.time_dependent_guards:
        raise ValidationError("grid DP supports time-independent guards only")
    if grid.lo.size != sysm.dim:
        raise ValidationError(f"grid has {grid.lo.size} axes, model has {sysm.dim} states")
    t0, tf = ocp.horizon
    K = grid.n_steps
    dt = (tf - t0) / K
    axes = grid.axes
    shape = grid.n_nodes
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.stack([m.ravel() for m in mesh])
    M = X.shape[1]
    controls = _controls(ocp, grid)
    diag = float(np.linalg.norm(grid.spacing))

    # per-control geometry, shared by every slice
    nu = controls.size
    n_corner = 2 ** X.shape[0]
    IDX = np.empty((nu, n_corner, M), dtype=np.int64)
    W = np.empty((nu, n_corner, M))
    C = np.empty((nu, M))
    cross_a = np.zeros((nu, M))  # weight of (V_{k+1} - V_{k+2}) for extrapolation
    n_clamped = 0
    worst = 0.0
    for j, u in enumerate(controls):
        F = _batch_field(ocp, X, u)
        step = dt * F
        worst = max(worst, float(np.max(np.linalg.norm(step, axis=0))))
        X1 = X + step
        L = _batch_cost(ocp, X, u)
        theta, which = _crossings(ocp, X, X1)
        Y = X1.copy()
        cost = L * dt
        hit = np.flatnonzero(np.isfinite(theta))
        if hit.size:
            th = theta[hit]
            Xc = X[:, hit] + th * (X1[:, hit] - X[:, hit])
            Yp = np.empty_like(Xc)
            for ci in np.unique(which[hit]):
                sel = which[hit] == ci
                Yp[:, sel] = np.asarray(sysm.guards[ci].reset(0.0, Xc[:, sel]), dtype=float)
            if grid.reset_mode == "continue":
                rest = (1.0 - th) * dt
                Fp = _batch_field(ocp, Yp, u)
                cost[hit] = L[hit] * th * dt + _batch_cost(ocp, Yp, u) * rest
                Yp = Yp + rest * Fp
            else:
                cost[hit] = L[hit] * th * dt
                cross_a[j, hit] = 1.0 - th
            Y[:, hit] = Yp
        IDX[j], W[j], nc = _stencil(axes, Y)
        n_clamped += nc
        C[j] = cost
    if worst > grid.max_cfl * diag:
        raise GridTooCoarse(f"Euler step {worst:.3g} exceeds {grid.max_cfl:g} cell diagonals ({diag:.3g} each)")

    V = np.empty((K + 1, M))
    P = np.empty((K, M))
    V[K] = np.array([float(ocp.terminal_cost(X[:, i])) for i in range(M)]) if ocp.terminal_cost is not None else 0.0
    flagged = 0
    any_cross = np.any(cross_a != 0.0)
    for k in range(K - 1, -1, -1):
        Vn = V[k + 1]
        Q = C + np.einsum("jcm,jcm->jm", W, Vn[IDX])
        if any_cross and k + 2 <= K:
            Vnn = V[k + 2]
            D = np.einsum("jcm,jcm->jm", W, (Vn - Vnn)[IDX])
            Q += cross_a * D
        best = np.argmin(Q, axis=0)
        v = Q[best, np.arange(M)]
        bad = ~np.isfinite(v)
        if np.any(bad):
            flagged += int(np.count_nonzero(bad))
            v[bad] = np.max(v[~bad]) if np.any(~bad) else 0.0
        V[k] = v
        P[k] = controls[best]
    times = np.linspace(t0, tf, K + 1)
    return ValueGrid(
        axes=axes,
        times=times,
        values=V.reshape((K + 1,) + shape),
        policy=P.reshape((K,) + shape),
        controls=controls,
        clamped=n_clamped / float(nu * M),
        flagged=flagged,
        model=ocp.name,
        meta={"dt": dt, "max_step_diagonals": worst / diag, "reset_mode": grid.reset_mode},
    )


def extract_policy(grid: ValueGrid, t: float, x, clamp: bool = False) -> float:
    """Interpolated feedback control at ``(t, x)``.

    The slice is the DP step containing t; in space the stored argmin table is
    interpolated multilinearly, so node queries return the stored value.

    Raises:
        OutOfGrid: outside the grid (unless ``clamp``).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    tol = 1e-9
    if not clamp:
        if t < grid.times[0] - tol or t > grid.times[-1] + tol:
            raise OutOfGrid(f"t = {t} outside [{grid.times[0]}, {grid.times[-1]}]")
        if np.any(x < grid.lo - tol) or np.any(x > grid.hi + tol):
            raise OutOfGrid(f"x = {x} outside the grid box")
    k = grid.slice_index(t)
    return float(multilinear(grid.policy[k], grid.axes, x[:, None])[0])


@dataclass
class ClosedLoopResult:
    """Closed-loop simulation under the DP policy."""

    arc: HybridArc
    cost: float
    clamped: bool

    def trajectory(self, n_per_unit: int = 200) -> tuple[Array, Array]:
        return self.arc.dense(n_per_unit)

    def x(self, t) -> Array:
        return self.arc.x(t)


def closed_loop(ocp: OptimalControlProblem, grid: ValueGrid, x0, cfg: Optional[FlowConfig] = None) -> ClosedLoopResult:
    """Simulate the hybrid system under the interpolated DP policy.

    Integrates slice by slice (the policy is piecewise constant in time) with
    the same event machinery as :func:`hybrid_core.flow`; policy lookups that
    leave the grid box are clamped and flagged. The quadrature column of the
    returned arc restarts at every slice; ``cost`` is the total.

    Raises:
        OutOfGrid: ``x0`` outside the grid.
        SolverError: flow failures.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if np.any(x0 < grid.lo - 1e-12) or np.any(x0 > grid.hi + 1e-12):
        raise OutOfGrid(f"x0 = {x0} outside the grid box")
    cfg = cfg or FlowConfig()
    state = {"clamped": False}
    lo, hi = grid.lo, grid.hi

    arc = None
    x = x0
    cost = 0.0
    for k in range(grid.times.size - 1):
        pol = grid.policy[k]

        def control(t, y, pol=pol):
            y = np.asarray(y, dtype=float)
            if np.any(y < lo - 1e-9) or np.any(y > hi + 1e-9):
                state["clamped"] = True
            return np.array([multilinear(pol, grid.axes, y[:, None])[0]])

        quad = lambda t, y, control=control: float(ocp.running_cost(t, y, control(t, y)))  # noqa: E731
        leg = flow(ocp.system, x, (grid.times[k], grid.times[k + 1]), cfg, control=control, quadrature=quad)
        arc = leg if arc is None else arc.extended(leg)
        x = leg.final_state
        cost += float(leg.final_quad[0])
    if ocp.terminal_cost is not None:
        cost += float(ocp.terminal_cost(arc.final_state))
    return ClosedLoopResult(arc, cost, state["clamped"])
