"""Hamiltonian corner conditions: lifting resets to the costate.

At a reset the costate satisfies two conditions:
- the momentum condition ``p+ . dDelta v = p- . v`` for every guard tangent v;
- the energy condition ``H(Delta x, p+) = H(x, p-)``.

Forward, the momentum condition fixes ``p+`` up to a line spanned by the
annihilator of ``dDelta(T Sigma)``. We write

    p+ = p_ref + eps |dh| nu,

where ``p_ref`` is the point of that line closest to ``p-`` and ``nu`` is the
unit annihilator oriented along ``dh``. For ``Delta = Id`` this is the
classical ``p+ = p- + eps dh``. The energy condition is a scalar equation in
``eps``, quadratic whenever H is quadratic in the momenta.

Backward, with the pre-event control known, the lift is linear (composition
with the augmented saltation map of the (cost, field) pair). Without it, a
scalar energy equation is solved and the root lying in the extended guard is
kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import BlockingNonEmpty, NoRealRoot, Tangential, Underdetermined
from .hybrid_core import (
    GuardChart,
    HybridSystem,
    fd_jacobian,
    guard_gradient,
    guard_time_derivative,
)
from .saltation import tangent_basis, _tangent_fd

__all__ = [
    "Hamiltonian",
    "CotangentPoint",
    "CornerSolution",
    "BeatingMomentumSet",
    "BeatingSet",
    "solve_corner_forward",
    "solve_corner_backward",
    "solve_corner_beating",
    "beating_sets",
    "select_branch",
    "solve_energy",
]

Array = np.ndarray
DISC_CLAMP = -1e-12


@dataclass
class Hamiltonian:
    """Scalar Hamiltonian ``H(t, x, p)`` with optional analytic derivatives.

    Missing derivatives are taken by central differences.

    Attributes:
        n: Configuration dimension.
        value: ``H(t, x, p)``.
        grad_x, grad_p: ``dH/dx`` and ``dH/dp``.
        hessian: Second derivatives ``[[Hxx, Hxp], [Hpx, Hpp]]`` (2n x 2n).
        control: Minimizing control ``u*(t, x, p)`` (optimal Hamiltonians).
        running_cost: ``l(t, x, p)`` evaluated at ``u*``, for cost quadrature.
        p0: Cost multiplier.
    """

    n: int
    value: Callable[[float, Array, Array], float]
    grad_x: Optional[Callable] = None
    grad_p: Optional[Callable] = None
    hessian: Optional[Callable] = None
    control: Optional[Callable] = None
    running_cost: Optional[Callable] = None
    p0: float = 1.0

    def __call__(self, t, x, p) -> float:
        return float(self.value(t, np.asarray(x, dtype=float), np.asarray(p, dtype=float)))

    def dx(self, t, x, p) -> Array:
        if self.grad_x is not None:
            return np.asarray(self.grad_x(t, x, p), dtype=float)
        return fd_jacobian(lambda y: self.value(t, y, p), np.asarray(x, dtype=float))[0]

    def dp(self, t, x, p) -> Array:
        if self.grad_p is not None:
            return np.asarray(self.grad_p(t, x, p), dtype=float)
        return fd_jacobian(lambda q: self.value(t, x, q), np.asarray(p, dtype=float))[0]

    def canonical(self, t, z) -> Array:
        """Hamilton's equations ``(H_p, -H_x)`` on ``z = (x, p)``."""
        x, p = z[: self.n], z[self.n :]
        return np.concatenate([self.dp(t, x, p), -self.dx(t, x, p)])

    def canonical_jacobian(self, t, z) -> Array:
        """Linearization ``[[Hpx, Hpp], [-Hxx, -Hxp]]`` of the canonical field."""
        n = self.n
        if self.hessian is not None:
            Hs = np.asarray(self.hessian(t, z[:n], z[n:]), dtype=float)
        else:
            Hs = _fd_hessian(lambda y: self.value(t, y[:n], y[n:]), np.asarray(z, dtype=float))
        A = np.empty((2 * n, 2 * n))
        A[:n, :n] = Hs[n:, :n]
        A[:n, n:] = Hs[n:, n:]
        A[n:, :n] = -Hs[:n, :n]
        A[n:, n:] = -Hs[:n, n:]
        return A


def _fd_hessian(fun, z: Array, rel: float = 1e-4) -> Array:
    """Central second differences of a scalar function.

    Differencing the value directly (instead of differencing numerical
    gradients) keeps the round-off at ``eps |H| / h^2`` with ``h ~ 1e-4``.
    """
    m = z.size
    h = rel * max(1.0, float(np.max(np.abs(z))))
    E = np.eye(m) * h
    f0 = fun(z)
    Hs = np.empty((m, m))
    for i in range(m):
        Hs[i, i] = (fun(z + E[i]) - 2.0 * f0 + fun(z - E[i])) / (h * h)
        for j in range(i):
            Hs[i, j] = Hs[j, i] = (
                fun(z + E[i] + E[j]) - fun(z + E[i] - E[j]) - fun(z - E[i] + E[j]) + fun(z - E[i] - E[j])
            ) / (4 * h * h)
    return Hs


@dataclass
class CotangentPoint:
    """Point ``(x, p)`` at time t; ``H`` is recomputed on access."""

    x: Array
    p: Array
    t: float
    hamiltonian: Hamiltonian = field(repr=False)

    @property
    def H(self) -> float:
        return self.hamiltonian(self.t, self.x, self.p)


@dataclass
class CornerSolution:
    """One real solution of the corner conditions."""

    p_plus: Array
    epsilon: float
    branch: str
    residual: float
    p_minus: Optional[Array] = None
    x_pre: Optional[Array] = None
    x_post: Optional[Array] = None
    t: float = 0.0
    momentum_residual: float = 0.0


# ---------------------------------------------------------------------------
# scalar energy equations


def solve_energy(F: Callable[[float], float], scale: float = 1.0, max_scan: float = 1e4) -> list[float]:
    """Real roots of a scalar energy equation ``F(eps) = 0``.

    A quadratic is fitted through three evaluations and checked against a
    fourth; on success roots come from the closed form (discriminant clamped
    at ``-1e-12``) and are polished by Newton steps. Otherwise a scan plus
    Brent bracketing is used.

    Returns:
        Roots sorted by absolute value.

    Raises:
        NoRealRoot: no real root.
        Underdetermined: F vanishes identically.
    """
    s = max(1.0, float(scale))
    f0, fp, fm, f2 = F(0.0), F(s), F(-s), F(2 * s)
    a = (fp + fm - 2 * f0) / (2 * s * s)
    b = (fp - fm) / (2 * s)
    c = f0
    mag = max(1.0, abs(f0), abs(fp), abs(fm))
    if abs(a * 4 * s * s + b * 2 * s + c - f2) <= 1e-9 * max(mag, abs(f2)):
        if abs(a) * s * s <= 1e-13 * mag:
            if abs(b) * s <= 1e-13 * mag:
                if abs(c) <= 1e-12 * mag:
                    raise Underdetermined("energy equation holds identically")
                raise NoRealRoot("energy equation is a nonzero constant")
            roots = [-c / b]
        else:
            disc = b * b - 4 * a * c
            if disc < DISC_CLAMP * max(1.0, b * b):
                raise NoRealRoot(f"energy equation has negative discriminant {disc:.3g}")
            disc = max(disc, 0.0)
            sq = math.sqrt(disc)
            if sq == 0.0:
                roots = [-b / (2 * a)]
            else:
                q = -0.5 * (b + math.copysign(sq, b))
                roots = [q / a, c / q] if q != 0.0 else [-b / (2 * a) - sq / (2 * a), -b / (2 * a) + sq / (2 * a)]
        roots = [_polish(F, r, s) for r in roots]
    else:
        roots = _scan_roots(F, s, max_scan)
        if not roots:
            raise NoRealRoot("no sign change of the energy equation")
    roots = sorted(set(roots), key=lambda r: (abs(r), r))
    return roots


def _polish(F, r, s, iters: int = 3) -> float:
    for _ in range(iters):
        fr = F(r)
        if fr == 0.0:
            break
        d = 1e-7 * max(s, abs(r))
        df = (F(r + d) - F(r - d)) / (2 * d)
        if df == 0.0 or not math.isfinite(df):
            break
        step = fr / df
        if abs(step) > 1e-3 * max(s, abs(r)):
            break
        r2 = r - step
        if abs(F(r2)) >= abs(fr):
            break
        r = r2
    return r


def _scan_roots(F, s, max_scan, n: int = 4001) -> list[float]:
    pos = np.geomspace(1e-6 * s, max_scan * s, n // 2)
    grid = np.concatenate([-pos[::-1], [0.0], pos])
    vals = np.array([F(e) for e in grid])
    roots = []
    for i in range(len(grid) - 1):
        if vals[i] == 0.0:
            roots.append(float(grid[i]))
        elif vals[i] * vals[i + 1] < 0:
            roots.append(brentq(F, grid[i], grid[i + 1], xtol=1e-15, rtol=4e-16))
    return roots


# ---------------------------------------------------------------------------
# forward corner


def _annihilator(DE: Array, dh: Array) -> tuple[Array, int]:
    """Unit covector annihilating the columns of DE, oriented along dh."""
    n = dh.size
    if DE.shape[1] == 0:
        nu = dh / np.linalg.norm(dh)
        return nu, n - 1
    U, sv, _ = np.linalg.svd(DE, full_matrices=True)
    rank = int(np.sum(sv > 1e-10 * max(1.0, sv[0] if sv.size else 1.0)))
    nu = U[:, -1]
    d = float(nu @ dh)
    if abs(d) > 1e-14:
        nu = nu * math.copysign(1.0, d)
    else:
        j = int(np.argmax(np.abs(nu)))
        nu = nu * math.copysign(1.0, nu[j])
    return nu, rank


def _extended(H: Hamiltonian, chart: GuardChart, t: float, x: Array, p: Array):
    """Extended-space data for time-dependent guards (time appended)."""
    n = x.size

    def Hx(y, q):  # H~(x, t, p, p_t) = H + p_t
        return H(y[n], y[:n], q[:n]) + q[n]

    xe = np.append(x, t)
    pe = np.append(p, -H(t, x, p))
    dh = np.append(guard_gradient(chart, t, x), guard_time_derivative(chart, t, x))

    def reset(y):
        return np.append(chart.reset(y[n], y[:n]), y[n])

    return Hx, xe, pe, dh, reset


def solve_corner_forward(
    H: Hamiltonian,
    chart: GuardChart,
    x_pre,
    p_pre,
    t: float = 0.0,
    time_dependent: bool = False,
) -> list[CornerSolution]:
    """All real solutions ``(p+, eps)`` of the forward corner conditions.

    Args:
        H: Hamiltonian.
        chart: Guard chart crossed at ``x_pre``.
        x_pre, p_pre: Pre-event state and costate.
        t: Event time.
        time_dependent: Use the time-extended conditions
            ``-(H+ - H-) = eps dh/dt``.

    Returns:
        Solutions sorted by ``|eps|``. A root with ``eps = 0`` is labelled
        ``identity``; the others ``branch1``, ``branch2``, ...

    Raises:
        Underdetermined: ``dDelta`` is not immersive on the guard tangent.
        NoRealRoot: the energy condition has no real solution.
    """
    x_pre = np.asarray(x_pre, dtype=float)
    p_pre = np.asarray(p_pre, dtype=float)
    n = x_pre.size
    if time_dependent:
        Hfun, xe, pe, dh, reset = _extended(H, chart, t, x_pre, p_pre)
    else:
        Hfun = lambda y, q: H(t, y, q)  # noqa: E731
        xe, pe = x_pre, p_pre
        dh = guard_gradient(chart, t, x_pre)
        reset = lambda y: np.asarray(chart.reset(t, y), dtype=float)  # noqa: E731
    m = xe.size
    E = tangent_basis(dh)
    if chart.jacobian is not None and not time_dependent:
        DE = np.asarray(chart.jacobian(t, x_pre), dtype=float) @ E
    else:
        DE = _tangent_fd(reset, xe, E)
    nu, rank = _annihilator(DE, dh)
    if rank < m - 1:
        raise Underdetermined(
            f"reset on guard {chart.id!r} is not immersive (rank {rank} < {m - 1})",
            x=x_pre,
            p=p_pre,
            guard_id=chart.id,
        )
    rhs = E.T @ pe
    p_base = np.linalg.lstsq(DE.T, rhs, rcond=None)[0]
    p_base = p_base - (p_base @ nu) * nu
    p_ref = p_base + (pe @ nu) * nu
    ndh = float(np.linalg.norm(dh))
    x_post = reset(xe)
    H_minus = Hfun(xe, pe)
    direction = ndh * nu

    def F(eps):
        return Hfun(x_post, p_ref + eps * direction) - H_minus

    roots = solve_energy(F, scale=1.0 + float(np.linalg.norm(pe)) / max(ndh, 1e-300))
    sols = []
    k = 0
    for eps in roots:
        pp = p_ref + eps * direction
        mom = float(np.max(np.abs(DE.T @ pp - rhs))) if DE.shape[1] else 0.0
        if abs(eps) * ndh <= 1e-12 * max(1.0, float(np.linalg.norm(pe))):
            label = "identity"
        else:
            k += 1
            label = f"branch{k}"
        sols.append(
            CornerSolution(
                p_plus=pp[:n].copy(),
                epsilon=float(eps),
                branch=label,
                residual=abs(F(eps)),
                p_minus=p_pre.copy(),
                x_pre=x_pre.copy(),
                x_post=np.asarray(x_post[:n], dtype=float),
                t=t,
                momentum_residual=mom,
            )
        )
    return sols


def select_branch(
    sols: Sequence[CornerSolution],
    rule: str = "largest",
    H: Optional[Hamiltonian] = None,
    chart: Optional[GuardChart] = None,
    system: Optional[HybridSystem] = None,
) -> CornerSolution:
    """Pick one forward corner solution.

    Rules:
        ``largest``: largest ``|eps|`` (non-identity branch).
        ``smallest``: smallest ``|eps|``.
        ``nonidentity``: smallest ``|eps|`` among roots that are not the
            identity; falls back to ``largest``.
        ``admissible``: smallest ``|eps|`` among roots whose post-reset
            extremal flow does not immediately re-fire the chart (needs H,
            chart); falls back to ``largest``.
        any branch label: that branch.
    """
    if not sols:
        raise NoRealRoot("no corner solution")
    if rule == "largest":
        return sols[-1]
    if rule == "smallest":
        return sols[0]
    if rule == "nonidentity":
        cand = [s for s in sols if s.branch != "identity"]
        return cand[0] if cand else sols[-1]
    if rule == "admissible":
        if H is None or chart is None:
            raise ValueError("admissible rule needs H and chart")
        cand = []
        for s in sols:
            if s.branch == "identity":
                continue
            g = float(chart.g(s.t, s.x_post))
            rate = chart.transversal_sign * float(guard_gradient(chart, s.t, s.x_post) @ H.dp(s.t, s.x_post, s.p_plus))
            if g > 1e-10 or (abs(g) <= 1e-10 and rate > 0):
                continue
            cand.append(s)
        return cand[0] if cand else sols[-1]
    for s in sols:
        if s.branch == rule:
            return s
    raise KeyError(f"no branch {rule!r} among {[s.branch for s in sols]}")


# ---------------------------------------------------------------------------
# backward corner


def solve_corner_backward(
    H: Hamiltonian,
    chart: GuardChart,
    x_post,
    p_post,
    t: float = 0.0,
    *,
    x_pre=None,
    f_pre=None,
    l_pre: Optional[float] = None,
    f_post=None,
    l_post: Optional[float] = None,
    inverse_reset: Optional[Callable] = None,
    tol_transversal: float = 1e-8,
) -> CornerSolution:
    """Pre-event costate from the post-event one.

    With the pre-event field value ``f_pre`` and running cost ``l_pre`` (read
    from the event log) the lift is the unique linear map

        p- = p+ D + lam dh,
        lam = (p0 l+ + p+ f+ - p0 l- - p+ D f-) / (dh . f-),

    with ``D = dDelta E E^T``, i.e. ``p- = p+ S`` for the saltation matrix of
    the (cost, field) pair. Without the log the scalar energy equation in
    ``lam`` is solved and the root inside the extended guard
    (``sign * dh . H_p(x-, p-) > 0``) is returned.

    Raises:
        Tangential: ``dh . f_pre`` vanishes.
        NoRealRoot: no root lies in the extended guard.
    """
    p_post = np.asarray(p_post, dtype=float)
    x_post = np.asarray(x_post, dtype=float)
    if x_pre is None:
        if inverse_reset is None:
            raise ValueError("x_pre or inverse_reset is required")
        x_pre = inverse_reset(t, x_post)
    x_pre = np.asarray(x_pre, dtype=float)
    dh = guard_gradient(chart, t, x_pre)
    E = tangent_basis(dh)
    if chart.jacobian is not None:
        DE = np.asarray(chart.jacobian(t, x_pre), dtype=float) @ E
    else:
        DE = _tangent_fd(lambda y: chart.reset(t, y), x_pre, E)
    base = (p_post @ DE) @ E.T  # p+ D
    H_plus = H(t, x_post, p_post)
    if f_pre is not None:
        f_pre = np.asarray(f_pre, dtype=float)
        rate = float(dh @ f_pre)
        if abs(rate) < tol_transversal * min(1.0, float(np.linalg.norm(dh) * np.linalg.norm(f_pre))) or rate == 0:
            raise Tangential(f"dh.f_pre = {rate:.3g} on guard {chart.id!r}")
        if f_post is None:
            f_post = H.dp(t, x_post, p_post)
        l_p = l_post if l_post is not None else (H_plus - float(p_post @ f_post)) / H.p0
        l_m = l_pre if l_pre is not None else l_p
        lam = (H.p0 * l_p + float(p_post @ f_post) - H.p0 * l_m - float(base @ f_pre)) / rate
        p_minus = base + lam * dh
        return CornerSolution(
            p_plus=p_post.copy(),
            epsilon=float(lam),
            branch="linear",
            residual=abs(H(t, x_pre, p_minus) - H_plus),
            p_minus=p_minus,
            x_pre=x_pre,
            x_post=x_post,
            t=t,
        )

    def F(lam):
        return H(t, x_pre, base + lam * dh) - H_plus

    roots = solve_energy(F, scale=1.0 + float(np.linalg.norm(p_post)))
    good = []
    for lam in roots:
        pm = base + lam * dh
        rate = chart.transversal_sign * float(dh @ H.dp(t, x_pre, pm))
        if rate > tol_transversal:
            good.append((lam, pm, rate))
    if not good:
        raise NoRealRoot(f"no pre-event costate in the extended guard of {chart.id!r}")
    lam, pm, _ = good[0]
    return CornerSolution(
        p_plus=p_post.copy(),
        epsilon=float(lam),
        branch="extended_guard" if len(good) == 1 else "extended_guard_min",
        residual=abs(F(lam)),
        p_minus=pm,
        x_pre=x_pre,
        x_post=x_post,
        t=t,
    )


# ---------------------------------------------------------------------------
# beating


@dataclass
class BeatingSet:
    """A beating set Sigma_k (points suffering k+1 instantaneous resets).

    Either a closed-form membership predicate with a description, or a
    sample of guard points.
    """

    k: int
    guard_id: str
    contains: Callable[[Array], bool]
    description: str = ""
    samples: Optional[Array] = None
    empty: bool = False
    tangent: Optional[Array] = None  # basis of T Sigma_k (columns)


@dataclass
class BeatingMomentumSet:
    """Costates compatible with a beating event."""

    x: Array
    x_post: Array
    annihilator: Array
    energy: float
    solutions: Array
    residuals: Array
    p_minus_tangential: float = 0.0


def beating_sets(system: HybridSystem, k_max: int = 3, n_samples: int = 4000) -> list[list[BeatingSet]]:
    """Nested beating sets ``Sigma_0 ⊇ Sigma_1 ⊇ ...`` up to ``k_max``.

    Systems that expose ``system.beating`` (a callable ``k -> list[BeatingSet]``,
    set by the built-in model constructors) get the closed form. Other systems
    get a sampled approximation built from guard points.

    Raises:
        BlockingNonEmpty: the sampled ``Sigma_{k_max}`` equals
            ``Sigma_{k_max-1}`` and is non-empty.
    """
    closed = getattr(system, "beating", None)
    if closed is not None:
        return [closed(k) for k in range(k_max + 1)]
    if system.box is None:
        raise ValueError("sampled beating sets need a finite state box")
    lo, hi = system.box
    rng = np.random.default_rng(0)
    pts = lo + (hi - lo) * rng.random((n_samples, system.dim))
    levels: list[list[BeatingSet]] = []
    current = []
    for c in system.guards:
        for x in pts:
            y = x.copy()
            for _ in range(20):
                hv = float(c.h(0.0, y))
                dh = guard_gradient(c, 0.0, y)
                y = y - hv * dh / float(dh @ dh)
                if abs(hv) < 1e-12:
                    break
            if abs(float(c.h(0.0, y))) <= 1e-10 and c.contains(0.0, y) and system.in_box(y):
                current.append((c, y))
    prev_count = None
    for k in range(k_max + 1):
        sets = []
        for c in system.guards:
            s = np.array([y for cc, y in current if cc is c]) if current else np.zeros((0, system.dim))
            sets.append(
                BeatingSet(k, c.id, _sample_membership(s), f"sampled ({len(s)} points)", samples=s, empty=len(s) == 0)
            )
        levels.append(sets)
        count = len(current)
        if k == k_max and prev_count is not None and count == prev_count and count > 0:
            raise BlockingNonEmpty(f"Sigma_{k_max} does not shrink ({count} samples)")
        prev_count = count
        nxt = []
        for c, y in current:
            img = np.asarray(c.reset(0.0, y), dtype=float)
            for c2 in system.guards:
                if abs(float(c2.h(0.0, img))) <= 1e-10 and c2.contains(0.0, img):
                    nxt.append((c, y))
                    break
        current = nxt
    return levels


def _sample_membership(samples: Array, tol: float = 1e-6):
    def contains(x):
        if samples.size == 0:
            return False
        return bool(np.min(np.max(np.abs(samples - np.asarray(x)), axis=1)) <= tol)

    return contains


def solve_corner_beating(
    H: Hamiltonian,
    sigma: Optional[BeatingSet],
    chart: GuardChart,
    x_pre,
    p,
    direction: str = "backward",
    t: float = 0.0,
    n_samples: int = 512,
    p_range: float = 4.0,
):
    """Corner conditions on a beating set with a constant (folded) reset.

    The composite reset ``Delta^{k+1}`` is constant on ``Sigma_k``, so its
    differential vanishes on ``T Sigma_k``:
    - the momentum condition forces the pre-event costate to annihilate
      ``T Sigma_k``, i.e. ``p- = eps nu`` with ``nu`` spanning the annihilator;
    - the post-event costate is only constrained by energy.

    Args:
        direction: ``backward`` returns the unique ``p-`` (root inside the
            extended guard) for a given ``p = p+``. ``forward`` takes
            ``p = p-`` and returns the one-parameter family of ``p+``
            (:class:`BeatingMomentumSet`) sampled at ``n_samples`` points.

    Raises:
        NoRealRoot: backward energy equation has no admissible root.
    """
    x_pre = np.asarray(x_pre, dtype=float)
    p = np.asarray(p, dtype=float)
    n = x_pre.size
    x_post = np.asarray(chart.reset(t, x_pre), dtype=float)
    if sigma is not None and sigma.tangent is not None:
        T = sigma.tangent
    else:
        T = tangent_basis(guard_gradient(chart, t, x_pre))
    # annihilator of T Sigma_k
    if T.shape[1]:
        U, _, _ = np.linalg.svd(T, full_matrices=True)
        ann = U[:, T.shape[1] :]
    else:
        ann = np.eye(n)
    dh = guard_gradient(chart, t, x_pre)
    if direction == "backward":
        if ann.shape[1] != 1:
            raise Underdetermined("backward beating lift needs a one-dimensional annihilator")
        nu = ann[:, 0] * (1.0 if float(ann[:, 0] @ dh) >= 0 else -1.0)
        H_plus = H(t, x_post, p)

        def F(eps):
            return H(t, x_pre, eps * nu) - H_plus

        roots = solve_energy(F, scale=1.0 + float(np.linalg.norm(p)))
        good = []
        for eps in roots:
            pm = eps * nu
            rate = chart.transversal_sign * float(dh @ H.dp(t, x_pre, pm))
            if rate > 0:
                good.append((eps, pm))
        if not good:
            raise NoRealRoot(f"no beating pre-costate in the extended guard of {chart.id!r}")
        eps, pm = good[0]
        return CornerSolution(
            p_plus=p.copy(),
            epsilon=float(eps),
            branch="beating",
            residual=abs(F(eps)),
            p_minus=pm,
            x_pre=x_pre,
            x_post=x_post,
            t=t,
        )
    # forward: family of p+ with H(x+, p+) = H(x-, p-)
    H_minus = H(t, x_pre, p)
    tang = float(np.max(np.abs(T.T @ p))) if T.shape[1] else 0.0
    grad = H.dp(t, x_post, np.zeros(n))
    e_b = grad / np.linalg.norm(grad) if np.linalg.norm(grad) > 0 else np.eye(n)[0]
    Q, _ = np.linalg.qr(np.column_stack([e_b, np.eye(n)]))
    e_b = Q[:, 0] * (1.0 if Q[:, 0] @ e_b >= 0 else -1.0)
    others = Q[:, 1:n]
    sols, res = [], []
    for s in np.linspace(-p_range, p_range, n_samples):
        base = others @ np.full(n - 1, s) if n > 1 else np.zeros(n)

        def F(eps, base=base):
            return H(t, x_post, base + eps * e_b) - H_minus

        try:
            roots = solve_energy(F, scale=1.0 + abs(s))
        except (NoRealRoot, Underdetermined):
            continue
        for r in roots:
            sols.append(base + r * e_b)
            res.append(abs(F(r)))
    return BeatingMomentumSet(
        x=x_pre,
        x_post=x_post,
        annihilator=ann,
        energy=H_minus,
        solutions=np.array(sols),
        residuals=np.array(res),
        p_minus_tangential=tang,
    )
