"""First variations through resets: saltation matrices and transition matrices.

The augmented differential of a reset is assembled in closed form,

    S = D + (f_post - D f_pre) dh / (dh . f_pre),    D = dDelta E E^T,

where the columns of E span ker dh. ``S`` agrees with dDelta on guard tangents
and maps the pre-event field onto the post-event field.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import SolverError, Tangential
from .hybrid_core import (
    FlowConfig,
    GuardChart,
    HybridArc,
    HybridSystem,
    ResetEvent,
    fd_jacobian,
    flow,
    guard_gradient,
    guard_time_derivative,
)

__all__ = [
    "SaltationMatrix",
    "TransitionMatrix",
    "TransitionTrace",
    "tangent_basis",
    "augmented_differential",
    "event_saltation",
    "propagate_variational",
    "conjugate_points",
    "caustic_trajectory",
    "symplectic_defect",
    "canonical_omega",
]

Array = np.ndarray


def tangent_basis(dh: Array) -> Array:
    """Orthonormal basis of ``ker dh`` (columns), shape (n, n-1).

    Computed from a complete QR factorization of ``dh`` as a column, so the
    basis depends on ``dh`` only (deterministic).
    """
    dh = np.asarray(dh, dtype=float).reshape(-1, 1)
    Q, _ = np.linalg.qr(dh, mode="complete")
    return Q[:, 1:]


@dataclass
class SaltationMatrix:
    """Augmented differential of one reset application."""

    matrix: Array
    event: Optional[ResetEvent] = None

    def __matmul__(self, other):
        return self.matrix @ other


def augmented_differential(
    f_pre: Array,
    f_post: Array,
    dDelta: Array,
    dh: Array,
    chart: Optional[GuardChart] = None,
    tol_transversal: float = 1e-8,
    event: Optional[ResetEvent] = None,
    dDelta_tangent: Optional[Array] = None,
) -> SaltationMatrix:
    """Saltation matrix of a reset.

    Args:
        f_pre, f_post: Field values before and after the reset.
        dDelta: Reset Jacobian (only its restriction to ``ker dh`` matters).
            Ignored when ``dDelta_tangent`` is given.
        dh: Guard covector at the pre-event state.
        chart: Unused except for error messages.
        tol_transversal: Threshold on ``|dh . f_pre|``, relative to
            ``|dh| |f_pre|`` when that product is small.
        event: Event reference stored on the result.
        dDelta_tangent: ``dDelta @ E`` for ``E = tangent_basis(dh)``, for
            resets only defined on the guard.

    Raises:
        Tangential: when ``dh . f_pre`` vanishes.
    """
    f_pre = np.asarray(f_pre, dtype=float)
    f_post = np.asarray(f_post, dtype=float)
    dh = np.asarray(dh, dtype=float)
    rate = float(dh @ f_pre)
    scale = min(1.0, float(np.linalg.norm(dh) * np.linalg.norm(f_pre)))
    if rate == 0.0 or abs(rate) < tol_transversal * scale:
        name = chart.id if chart is not None else "?"
        raise Tangential(f"dh.f_pre = {rate:.3g} on guard {name!r}")
    E = tangent_basis(dh)
    DE = np.asarray(dDelta_tangent, dtype=float) if dDelta_tangent is not None else np.asarray(dDelta, dtype=float) @ E
    D = DE @ E.T
    S = D + np.outer(f_post - D @ f_pre, dh) / rate
    return SaltationMatrix(S, event)


def event_saltation(
    system: HybridSystem,
    fieldfun: Callable[[float, Array], Array],
    chart: GuardChart,
    t: float,
    x_pre: Array,
    x_post: Array,
    tol_transversal: float = 1e-8,
) -> Array:
    """Saltation matrix of one reset application on ``system``.

    Time-dependent guards are handled on the extended space (x, t) with the
    field (f, 1); the state block of the extended matrix is returned, since
    the time variation of a fixed-time initial condition is zero.
    """
    n = system.dim
    f_pre = fieldfun(t, x_pre)
    f_post = fieldfun(t, x_post)
    if not system.time_dependent_guards:
        dh = guard_gradient(chart, t, x_pre)
        if chart.jacobian is not None:
            DE = np.asarray(chart.jacobian(t, x_pre)) @ tangent_basis(dh)
        else:
            DE = _tangent_fd(lambda y: chart.reset(t, y), x_pre, tangent_basis(dh))
        return augmented_differential(f_pre, f_post, None, dh, chart, tol_transversal, dDelta_tangent=DE).matrix
    dh = np.append(guard_gradient(chart, t, x_pre), guard_time_derivative(chart, t, x_pre))
    E = tangent_basis(dh)

    def ext_reset(y):
        return np.append(chart.reset(y[n], y[:n]), y[n])

    DE = _tangent_fd(ext_reset, np.append(x_pre, t), E)
    S = augmented_differential(
        np.append(f_pre, 1.0), np.append(f_post, 1.0), None, dh, chart, tol_transversal, dDelta_tangent=DE
    ).matrix
    return S[:n, :n]


def _tangent_fd(fun, x, E, rel: float = 1e-6) -> Array:
    """Directional central differences of ``fun`` along the columns of E."""
    x = np.asarray(x, dtype=float)
    d = rel * max(1.0, float(np.max(np.abs(x))))
    cols = [(np.asarray(fun(x + d * e)) - np.asarray(fun(x - d * e))) / (2 * d) for e in E.T]
    return np.array(cols).T if cols else np.zeros((x.size, 0))


@dataclass
class TransitionMatrix:
    """Fundamental solution Phi(t, t0) of the hybrid variational equation."""

    phi: Array
    t0: float
    t: float

    def _half(self) -> int:
        n = self.phi.shape[0]
        if n % 2:
            raise ValueError("blocks are defined for the 2n x 2n extremal case")
        return n // 2

    @property
    def phi11(self) -> Array:
        k = self._half()
        return self.phi[:k, :k]

    @property
    def phi12(self) -> Array:
        k = self._half()
        return self.phi[:k, k:]

    @property
    def phi21(self) -> Array:
        k = self._half()
        return self.phi[k:, :k]

    @property
    def phi22(self) -> Array:
        k = self._half()
        return self.phi[k:, k:]


@dataclass
class TransitionTrace:
    """Arc integrated together with its transition matrix."""

    arc: HybridArc

    @property
    def t0(self) -> float:
        return self.arc.t0

    def at(self, t: float, side: str = "right") -> TransitionMatrix:
        return TransitionMatrix(self.arc.phi(t, side), self.arc.t0, t)

    @property
    def final(self) -> TransitionMatrix:
        return TransitionMatrix(self.arc.final_phi, self.arc.t0, self.arc.t1)

    def sample(self, ts: Sequence[float]) -> Array:
        return np.array([self.arc.phi(t) for t in ts])

    def event_free_windows(self) -> list[tuple[float, float]]:
        return [(s.t_start, s.t_end) for s in self.arc.segments]


def propagate_variational(
    system: HybridSystem,
    arc_or_x0,
    jacobian: Optional[Callable[[float, Array], Array]] = None,
    t_span=None,
    cfg: Optional[FlowConfig] = None,
    control=None,
    quadrature=None,
) -> TransitionTrace:
    """Integrate the hybrid variational equation along an arc.

    Phi is integrated together with the state in the same RK45 steps
    (piggyback), jumps by the saltation matrix at each reset and starts at the
    identity.

    Args:
        system: Hybrid system.
        arc_or_x0: A base :class:`HybridArc` (its initial state and window are
            reused) or an initial state, in which case ``t_span`` is required.
        jacobian: ``A(t, x)``; system Jacobian or central differences if omitted.
        t_span: Window when an initial state is given.
        cfg: Flow configuration.
        control, quadrature: Forwarded to :func:`flow`.
    """
    cfg = cfg or FlowConfig()
    if isinstance(arc_or_x0, HybridArc):
        x0 = arc_or_x0.segments[0].z(arc_or_x0.t0)[: system.dim]
        t_span = (arc_or_x0.t0, arc_or_x0.t1)
    else:
        x0 = np.asarray(arc_or_x0, dtype=float)
        if t_span is None:
            raise ValueError("t_span is required with an initial state")

    # transversality was already tested by the flow, relative to the local
    # rate scale; only an exactly tangential field is rejected here
    def salt(fieldfun, chart, t, xm, xp):
        return event_saltation(system, fieldfun, chart, t, xm, xp, 0.0)

    arc = flow(
        system,
        x0,
        t_span,
        cfg,
        control=control,
        quadrature=quadrature,
        variational=True,
        jacobian=jacobian,
        saltation=salt,
    )
    return TransitionTrace(arc)


def canonical_omega(n: int) -> Array:
    """Canonical symplectic matrix [[0, I], [-I, 0]] of size 2n."""
    I = np.eye(n)
    Z = np.zeros((n, n))
    return np.block([[Z, I], [-I, Z]])


def symplectic_defect(phi) -> tuple[float, float]:
    """Return ``(max|Phi^T Omega Phi - Omega|, |det Phi - 1|)``."""
    P = phi.phi if isinstance(phi, TransitionMatrix) else np.asarray(phi, dtype=float)
    m = P.shape[0]
    if m % 2:
        raise ValueError("symplectic defect needs a 2n x 2n matrix")
    W = canonical_omega(m // 2)
    return float(np.max(np.abs(P.T @ W @ P - W))), float(abs(np.linalg.det(P) - 1.0))


def _det12(trace: TransitionTrace, t: float) -> float:
    return float(np.linalg.det(trace.at(t).phi12))


def conjugate_points(
    trace: TransitionTrace,
    window: Optional[tuple[float, float]] = None,
    per_unit: int = 2000,
    tol_t: float = 1e-12,
    zero_tol: float = 1e-10,
) -> list[dict]:
    """Times where ``det Phi12(t, t0)`` vanishes.

    Sign changes are searched inside each event-free segment only; a sign flip
    across a reset is a jump of Phi, not a zero. ``t0`` itself is excluded.

    Returns:
        Dicts with keys ``t`` and ``kind`` (``crossing``, ``tangential`` or
        ``interval`` when det Phi12 vanishes on a stretch of samples).
    """
    t0 = trace.t0
    lo, hi = window if window is not None else (trace.arc.t0, trace.arc.t1)
    out: list[dict] = []
    for seg in trace.arc.segments:
        a, b = max(lo, seg.t_start), min(hi, seg.t_end)
        if b <= a:
            continue
        k = max(3, int(np.ceil((b - a) * per_unit)) + 1)
        ts = np.linspace(a, b, k)
        n = trace.arc.dim // 2
        Z = seg.sol(ts - seg.t_start)
        m = trace.arc.dim + trace.arc.n_quad
        P = Z[m:].T.reshape(k, 2 * n, 2 * n)
        d = np.linalg.det(P[:, :n, n:])
        run_start = None
        for i in range(k):
            if ts[i] <= t0 + tol_t:
                continue
            small = abs(d[i]) < zero_tol
            if small and run_start is None:
                run_start = i
            if i + 1 < k and d[i] != 0.0 and d[i + 1] != 0.0 and np.sign(d[i]) != np.sign(d[i + 1]):
                ta, tb = ts[i], ts[i + 1]
                fa = d[i]
                while tb - ta > tol_t:
                    tm = 0.5 * (ta + tb)
                    fm = float(np.linalg.det(seg.z(tm)[m:].reshape(2 * n, 2 * n)[:n, n:]))
                    if fm == 0.0:
                        ta = tb = tm
                        break
                    if np.sign(fm) == np.sign(fa):
                        ta, fa = tm, fm
                    else:
                        tb = tm
                out.append({"t": 0.5 * (ta + tb), "kind": "crossing"})
                run_start = None
                continue
            if not small and run_start is not None:
                _flag_run(out, ts, d, run_start, i - 1)
                run_start = None
        if run_start is not None:
            _flag_run(out, ts, d, run_start, k - 1)
    # drop duplicates produced by a crossing that also dipped below zero_tol
    out.sort(key=lambda r: r["t"])
    dedup: list[dict] = []
    for r in out:
        if dedup and abs(r["t"] - dedup[-1]["t"]) < 2.0 / per_unit and r["kind"] != "crossing":
            continue
        dedup.append(r)
    return dedup


def _flag_run(out, ts, d, i0, i1):
    seg = d[i0 : i1 + 1]
    if i1 - i0 >= 2:
        out.append({"t": float(ts[i0]), "kind": "interval", "t_end": float(ts[i1])})
        return
    # a sign change in the run is reported as a crossing already
    if np.all(seg >= 0) or np.all(seg <= 0):
        j = i0 + int(np.argmin(np.abs(seg)))
        out.append({"t": float(ts[j]), "kind": "tangential"})


def caustic_trajectory(
    extremal_system: HybridSystem,
    x0: Array,
    momenta: Sequence,
    t_window: tuple[float, float],
    cfg: Optional[FlowConfig] = None,
    jacobian=None,
    per_unit: int = 2000,
    log: Optional[list] = None,
) -> list[tuple[float, float, Array]]:
    """Caustic point cloud from a fan of extremals.

    For each initial momentum the extremal from ``(x0, p0)`` is integrated with
    its 2n x 2n transition matrix and the conjugate times are collected.

    Args:
        extremal_system: Hybrid system on (x, p).
        x0: Base point (length n).
        momenta: Initial momenta (scalars for n = 1 or length-n arrays).
        t_window: Integration window.
        cfg: Flow configuration.
        jacobian: Canonical-field Jacobian ``A(t, z)``.
        per_unit: det Phi12 samples per unit time.
        log: Receives ``(p0, error name)`` for skipped extremals.

    Returns:
        ``(p0, t_star, x_star)`` triples ordered by (p0, t).
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    out = []
    for p0 in momenta:
        p = np.atleast_1d(np.asarray(p0, dtype=float))
        z0 = np.concatenate([x0, p])
        try:
            tr = propagate_variational(extremal_system, z0, jacobian, t_span=t_window, cfg=cfg)
        except SolverError as err:
            if log is not None:
                log.append((p0, type(err).__name__))
            continue
        for c in conjugate_points(tr, per_unit=per_unit, tol_t=(cfg or FlowConfig()).tol_t):
            x_star = tr.arc.x(c["t"])[: x0.size]
            out.append((p0, c["t"], x_star))
    out.sort(key=lambda r: (tuple(np.atleast_1d(r[0])), r[1]))
    return out
