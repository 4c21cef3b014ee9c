"""Built-in models with their closed-form oracles.

- Bouncing ball, optionally damped (restitution c) or on an oscillating table.
- Two leaky integrate-and-fire neurons with a single control input.
- Shortest path from A to B via a mirror line (specular reflection).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .corner import BeatingSet, Hamiltonian
from .errors import SolverError, ValidationError, ZenoDetected
from .hpmp import ImageChart, OptimalControlProblem, extremal_system
from .hybrid_core import FlowConfig, GuardChart, HybridSystem, flow

__all__ = [
    "BouncingBallParams",
    "NeuronParams",
    "MirrorParams",
    "build_ball",
    "ball_hamiltonian",
    "build_ball_extremal",
    "zeno_time",
    "estimate_zeno_time",
    "zeno_kernel_vector",
    "zeno_limit_matrix",
    "build_neuron",
    "neuron_hamiltonian",
    "build_mirror",
    "mirror_touch_point",
    "build_mirror_extremal",
    "build_lqr",
    "riccati_value",
]

Array = np.ndarray


# ---------------------------------------------------------------------------
# bouncing ball


@dataclass(frozen=True)
class BouncingBallParams:
    """Ball of mass m under gravity g above a table.

    ``c`` is the restitution parameter: the reset is ``y -> -c^2 y``.
    ``table='oscillating'`` moves the table as ``A sin(omega t)``.
    """

    m: float = 1.0
    g: float = 2.0
    c: float = 1.0
    table: str = "stationary"
    A: float = 0.0
    omega: float = 1.0

    def __post_init__(self):
        if not (self.m > 0 and self.g > 0):
            raise ValidationError("ball needs m > 0 and g > 0")
        if not (0 < self.c <= 1):
            raise ValidationError("restitution c must lie in (0, 1]")
        if self.table not in ("stationary", "oscillating"):
            raise ValidationError(f"unknown table {self.table!r}")


def _ball_chart(P: BouncingBallParams, momentum_reset: bool) -> GuardChart:
    c2 = P.c**2
    if P.table == "stationary":
        h = lambda t, x: x[0]  # noqa: E731
        grad = lambda t, x: np.array([1.0] + [0.0] * (len(x) - 1))  # noqa: E731
        dh_dt = None
        if momentum_reset:
            reset = lambda t, x: np.stack([x[0], -c2 * x[1]])  # noqa: E731
            jac = lambda t, x: np.diag([1.0, -c2])  # noqa: E731
        else:
            reset = lambda t, x: np.array(x, dtype=float, copy=True)  # noqa: E731
            jac = lambda t, x: np.eye(len(x))  # noqa: E731
    else:
        A, w, m = P.A, P.omega, P.m
        h = lambda t, x: x[0] - A * np.sin(w * t)  # noqa: E731
        grad = lambda t, x: np.array([1.0] + [0.0] * (len(x) - 1))  # noqa: E731
        dh_dt = lambda t, x: -A * w * math.cos(w * t)  # noqa: E731
        if momentum_reset:
            reset = lambda t, x: np.stack([x[0], -c2 * x[1] + (1 + c2) * m * A * w * np.cos(w * t)])  # noqa: E731
            jac = lambda t, x: np.diag([1.0, -c2])  # noqa: E731
        else:
            reset = lambda t, x: np.array(x, dtype=float, copy=True)  # noqa: E731
            jac = None
    return GuardChart("impact", h, reset, None, -1, grad, dh_dt, jac)


def build_ball(params: BouncingBallParams = BouncingBallParams(), x_min: float = -1.0) -> HybridSystem:
    """Ball state ``(x, y)``: height and momentum.

    Continuous dynamics ``x' = y/m, y' = -m g``; impact guard ``x = 0``
    (``x = A sin(omega t)`` for the oscillating table) crossed downward; reset
    ``y -> -c^2 y (+ (1 + c^2) m A omega cos(omega t))``.
    The box allows ``x >= x_min`` so initial states slightly below the table
    can be used for finite differences.
    """
    P = params
    m, g = P.m, P.g

    def field(t, x, u=None):
        return np.array([x[1] / m, -m * g])

    def jac(t, x, u=None):
        return np.array([[0.0, 1.0 / m], [0.0, 0.0]])

    sys = HybridSystem(
        2,
        field,
        [_ball_chart(P, True)],
        (np.array([x_min, -np.inf]), np.array([np.inf, np.inf])),
        P.table == "oscillating",
        ["x", "y"],
        jacobian=jac,
    )
    sys.beating = lambda k: [BeatingSet(k, "impact", lambda x: k == 0 and abs(x[0]) < 1e-12, "x = 0" if k == 0 else "empty", empty=k > 0)]
    return sys


def ball_hamiltonian(params: BouncingBallParams = BouncingBallParams()) -> tuple[Hamiltonian, GuardChart]:
    """Mechanical Hamiltonian ``H = p^2/(2m) + m g x`` and its impact chart.

    The chart resets the state by the identity; the momentum jump then comes
    from the corner conditions.
    """
    m, g = params.m, params.g
    H = Hamiltonian(
        1,
        lambda t, x, p: p[0] ** 2 / (2 * m) + m * g * x[0],
        grad_x=lambda t, x, p: np.array([m * g]),
        grad_p=lambda t, x, p: np.array([p[0] / m]),
        hessian=lambda t, x, p: np.array([[0.0, 0.0], [0.0, 1.0 / m]]),
    )
    chart = _ball_chart(params, False)
    chart = GuardChart(chart.id, chart.h, chart.reset, None, -1, chart.grad, chart.dh_dt, chart.jacobian)
    return H, chart


def build_ball_extremal(params: BouncingBallParams = BouncingBallParams(), branch_rule: str = "nonidentity", with_guard: bool = True) -> HybridSystem:
    """Ball as a Hamiltonian hybrid system on ``(x, p)``.

    ``with_guard=False`` gives pure free fall (no impacts).
    """
    H, chart = ball_hamiltonian(params)
    return extremal_system(
        H,
        [chart] if with_guard else [],
        (np.array([-1.0]), np.array([np.inf])),
        branch_rule,
        params.table == "oscillating",
        ["x", "p"],
    )


def zeno_time(params: BouncingBallParams, x0: float, y0: float) -> float:
    """Accumulation time of the damped ball started at height x0, momentum y0.

    First impact after ``(y0 + s)/(m g)`` with ``s = sqrt(y0^2 + 2 m^2 g x0)``,
    then a geometric series of flights ``2 c^{2k} s/(m g)``. Returns ``inf``
    for ``c = 1``.
    """
    m, g, c2 = params.m, params.g, params.c**2
    s = math.sqrt(y0 * y0 + 2 * m * m * g * x0)
    if s == 0.0:
        return 0.0
    if c2 >= 1.0:
        return math.inf
    return (y0 + s) / (m * g) + (2 * c2 / (m * g)) * s / (1 - c2)


def zeno_limit_matrix(params: BouncingBallParams, y0: float) -> Array:
    """Limit of the transition-matrix products at the Zeno time, from ``(0+, y0)``."""
    m, g, c2 = params.m, params.g, params.c**2
    return np.array([[0.0, 0.0], [m * m * g * (1 + c2) / (y0 * (1 - c2)), 2 / (1 - c2)]])


def zeno_kernel_vector(params: BouncingBallParams, y0: float) -> Array:
    """Kernel of the Zeno limit matrix and of dζ at ``(0, y0)``."""
    m, g, c2 = params.m, params.g, params.c**2
    return np.array([-2 * y0, m * m * g * (1 + c2)])


# ---------------------------------------------------------------------------
# neurons


@dataclass(frozen=True)
class NeuronParams:
    """Two leaky integrate-and-fire neurons (R = 1, v_r = 0, no synaptic kernel).

    Attributes:
        eta: Firing threshold.
        w12: Coupling: a spike raises the other potential by ``w12 * eta``.
        I0: Base current, must exceed eta.
        horizon: Time horizon T.
        u_max: Control box half-width.
    """

    eta: float = 1.0
    w12: float = 0.5
    I0: float = 1.5
    horizon: float = 1.0
    u_max: float = 2.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValidationError("eta must be positive")
        if not (0 < self.w12 < 1):
            raise ValidationError("w12 must lie in (0, 1)")
        if not self.I0 > self.eta:
            raise ValidationError("I0 must exceed eta")


def neuron_hamiltonian(P: NeuronParams) -> Hamiltonian:
    """Optimal Hamiltonian with ``u* = -p1`` (unconstrained minimizer)."""
    I0 = P.I0

    def value(t, x, p):
        d = x[0] - x[1]
        return -0.5 * p[0] ** 2 - 2.0 * d * d + p[1] * (-x[1] + I0) + p[0] * (-x[0] + I0)

    def grad_x(t, x, p):
        d = x[0] - x[1]
        return np.array([-4.0 * d - p[0], 4.0 * d - p[1]])

    def grad_p(t, x, p):
        return np.array([-p[0] - x[0] + I0, -x[1] + I0])

    def hessian(t, x, p):
        return np.array(
            [
                [-4.0, 4.0, -1.0, 0.0],
                [4.0, -4.0, 0.0, -1.0],
                [-1.0, 0.0, -1.0, 0.0],
                [0.0, -1.0, 0.0, 0.0],
            ]
        )

    def control(t, x, p):
        return np.array([-p[0]])

    def running(t, x, p):
        d = x[0] - x[1]
        return 0.5 * p[0] ** 2 - 2.0 * d * d

    return Hamiltonian(2, value, grad_x, grad_p, hessian, control, running, 1.0)


def _neuron_charts(P: NeuronParams, tol: float = 1e-10) -> list[GuardChart]:
    eta, w = P.eta, P.w12
    split = eta - w * eta
    e1 = lambda t, x: np.array([1.0, 0.0])  # noqa: E731
    e2 = lambda t, x: np.array([0.0, 1.0])  # noqa: E731
    return [
        GuardChart(
            "S1_0",
            lambda t, x: x[0] - eta,
            lambda t, x: np.stack([np.zeros_like(x[0]), x[1] + w * eta]),
            lambda t, x: x[1] < split + tol,
            1,
            e1,
            jacobian=lambda t, x: np.array([[0.0, 0.0], [0.0, 1.0]]),
        ),
        GuardChart(
            "S1_1",
            lambda t, x: x[0] - eta,
            lambda t, x: np.stack([np.full_like(x[0], w * eta), np.zeros_like(x[1])]),
            lambda t, x: x[1] >= split - tol,
            1,
            e1,
            jacobian=lambda t, x: np.zeros((2, 2)),
        ),
        GuardChart(
            "S2_0",
            lambda t, x: x[1] - eta,
            lambda t, x: np.stack([x[0] + w * eta, np.zeros_like(x[1])]),
            lambda t, x: x[0] < split + tol,
            1,
            e2,
            jacobian=lambda t, x: np.array([[1.0, 0.0], [0.0, 0.0]]),
        ),
        GuardChart(
            "S2_1",
            lambda t, x: x[1] - eta,
            lambda t, x: np.stack([np.zeros_like(x[0]), np.full_like(x[1], w * eta)]),
            lambda t, x: x[0] >= split - tol,
            1,
            e2,
            jacobian=lambda t, x: np.zeros((2, 2)),
        ),
    ]


def _neuron_beating(P: NeuronParams):
    """Closed-form beating sets of the uncorrected resets.

    With the uncorrected resets, a spike of neuron 1 at ``v2 >= eta - w eta``
    pushes neuron 2 over threshold, so ``Sigma^1_1 = {eta} x [eta - w eta, eta]``
    and symmetrically ``Sigma^2_1``. The second image ``(w eta, 0)`` is off
    both guards, so ``Sigma_2`` is empty.
    """
    eta, w = P.eta, P.w12
    a = eta - w * eta
    tol = 1e-12

    def level(k):
        if k == 0:
            return [
                BeatingSet(0, "S1", lambda x: abs(x[0] - eta) <= tol and -tol <= x[1] <= eta + tol, f"{{{eta:g}}} x [0, {eta:g}]", tangent=np.array([[0.0], [1.0]])),
                BeatingSet(0, "S2", lambda x: abs(x[1] - eta) <= tol and -tol <= x[0] <= eta + tol, f"[0, {eta:g}] x {{{eta:g}}}", tangent=np.array([[1.0], [0.0]])),
            ]
        if k == 1:
            return [
                BeatingSet(1, "S1_1", lambda x: abs(x[0] - eta) <= tol and a - tol <= x[1] <= eta + tol, f"{{{eta:g}}} x [{a:g}, {eta:g}]", tangent=np.array([[0.0], [1.0]])),
                BeatingSet(1, "S2_1", lambda x: abs(x[1] - eta) <= tol and a - tol <= x[0] <= eta + tol, f"[{a:g}, {eta:g}] x {{{eta:g}}}", tangent=np.array([[1.0], [0.0]])),
            ]
        return [
            BeatingSet(k, "S1", lambda x: False, "empty", empty=True),
            BeatingSet(k, "S2", lambda x: False, "empty", empty=True),
        ]

    return level


def build_neuron(params: NeuronParams = NeuronParams(), v_box: tuple = (-1.0, 1.0)) -> OptimalControlProblem:
    """Two-neuron synchronization-avoidance problem.

    Field ``v1' = -v1 + I0 + u, v2' = -v2 + I0``; running cost
    ``u^2/2 - 2 (v1 - v2)^2``; no terminal cost. Charts in order
    Sigma^1_0, Sigma^1_1, Sigma^2_0, Sigma^2_1 with the folded resets:

    - ``(eta, v2) -> (0, v2 + w eta)`` for ``v2 < eta - w eta``;
    - ``(eta, v2) -> (w eta, 0)`` otherwise;
    - symmetric for neuron 2.

    The lower chart wins at the shared endpoint; Sigma^1 wins at (eta, eta).
    """
    P = params
    I0 = P.I0

    def field(t, x, u=None):
        uu = 0.0 if u is None else float(np.atleast_1d(u)[0])
        return np.array([-x[0] + I0 + uu, -x[1] + I0])

    def field_batch(X, U):
        return np.stack([-X[0] + I0 + U, -X[1] + I0 + 0.0 * U])

    def cost(t, x, u):
        uu = float(np.atleast_1d(u)[0])
        d = x[0] - x[1]
        return 0.5 * uu * uu - 2.0 * d * d

    def cost_batch(X, U):
        d = X[0] - X[1]
        return 0.5 * U * U - 2.0 * d * d

    lo, hi = v_box
    sys = HybridSystem(
        2,
        field,
        _neuron_charts(P),
        (np.array([lo, lo]), np.array([hi, hi])),
        False,
        ["v1", "v2"],
        jacobian=lambda t, x, u=None: np.array([[-1.0, 0.0], [0.0, -1.0]]),
    )
    sys.beating = _neuron_beating(P)
    sys.field_batch = field_batch
    eta, w = P.eta, P.w12
    split = eta - w * eta
    images = [
        # Sigma^1_0 image: {0} x [w eta, eta); reversed flow crosses v1 = 0 downward
        ImageChart("S1_0", lambda t, x: -x[0], lambda t, x: np.array([eta, x[1] - w * eta]), lambda t, x: w * eta - 1e-10 <= x[1] < eta, 1),
        ImageChart("S2_0", lambda t, x: -x[1], lambda t, x: np.array([x[0] - w * eta, eta]), lambda t, x: w * eta - 1e-10 <= x[0] < eta, 1),
    ]
    ocp = OptimalControlProblem(
        system=sys,
        running_cost=cost,
        horizon=(0.0, P.horizon),
        terminal_cost=lambda x: 0.0,
        terminal_gradient=lambda x: np.zeros(2),
        control_dim=1,
        control_bounds=None,
        affine=(lambda t, x: np.array([-x[0] + I0, -x[1] + I0]), lambda t, x: np.array([[1.0], [0.0]])),
        quadratic_cost=(np.array([[1.0]]), lambda t, x: np.zeros(1)),
        hamiltonian=neuron_hamiltonian(P),
        image_charts=images,
        name="neuron",
    )
    ocp.cost_batch = cost_batch
    ocp.params = P
    ocp.dp_controls = (-P.u_max, P.u_max)
    ocp.split = split
    return ocp


# ---------------------------------------------------------------------------
# mirror


@dataclass(frozen=True)
class MirrorParams:
    """Endpoints A and B below the mirror line ``y = 0``."""

    A: tuple = (0.0, -1.0)
    B: tuple = (2.0, -1.0)
    horizon: float = 1.0

    def __post_init__(self):
        if not (self.A[1] < 0 and self.B[1] < 0):
            raise ValidationError("mirror endpoints need negative second coordinates")


def mirror_touch_point(params: MirrorParams) -> float:
    """Abscissa z* of the reflection point, ``(x1 y2 + x2 y1)/(y1 + y2)``."""
    (x1, y1), (x2, y2) = params.A, params.B
    return (x1 * y2 + x2 * y1) / (y1 + y2)


def _mirror_chart() -> GuardChart:
    return GuardChart(
        "mirror",
        lambda t, x: x[1],
        lambda t, x: np.array(x, dtype=float, copy=True),
        None,
        1,
        lambda t, x: np.array([0.0, 1.0]),
        jacobian=lambda t, x: np.eye(2),
    )


def build_mirror(params: MirrorParams = MirrorParams()) -> OptimalControlProblem:
    """Minimum-energy path ``x' = u, l = |u|^2/2`` from A to B with a mirror.

    Over a fixed horizon the minimum-energy path is the constant-speed
    shortest path, so the extremal is a broken geodesic reflecting at y = 0.
    Optimal Hamiltonian ``H = -|p|^2/2`` with ``u* = -p``.
    """
    H = Hamiltonian(
        2,
        lambda t, x, p: -0.5 * (p[0] ** 2 + p[1] ** 2),
        grad_x=lambda t, x, p: np.zeros(2),
        grad_p=lambda t, x, p: -np.asarray(p, dtype=float),
        hessian=lambda t, x, p: np.block([[np.zeros((2, 2)), np.zeros((2, 2))], [np.zeros((2, 2)), -np.eye(2)]]),
        control=lambda t, x, p: -np.asarray(p, dtype=float),
        running_cost=lambda t, x, p: 0.5 * (p[0] ** 2 + p[1] ** 2),
    )
    sys = HybridSystem(
        2,
        lambda t, x, u=None: np.zeros(2) if u is None else np.asarray(u, dtype=float),
        [_mirror_chart()],
        (np.array([-np.inf, -np.inf]), np.array([np.inf, 1.0])),
        False,
        ["x", "y"],
    )
    ocp = OptimalControlProblem(
        system=sys,
        running_cost=lambda t, x, u: 0.5 * float(np.dot(u, u)),
        horizon=(0.0, params.horizon),
        x_final=np.array(params.B, dtype=float),
        control_dim=2,
        affine=(lambda t, x: np.zeros(2), lambda t, x: np.eye(2)),
        quadratic_cost=(np.eye(2), lambda t, x: np.zeros(2)),
        hamiltonian=H,
        name="mirror",
    )
    ocp.params = params
    return ocp


def build_mirror_extremal(branch_rule: str = "nonidentity") -> HybridSystem:
    """Geodesic flow ``H = |p|^2/2`` on the plane with the mirror guard."""
    H = Hamiltonian(
        2,
        lambda t, x, p: 0.5 * (p[0] ** 2 + p[1] ** 2),
        grad_x=lambda t, x, p: np.zeros(2),
        grad_p=lambda t, x, p: np.asarray(p, dtype=float),
        hessian=lambda t, x, p: np.block([[np.zeros((2, 2)), np.zeros((2, 2))], [np.zeros((2, 2)), np.eye(2)]]),
    )
    return extremal_system(H, [_mirror_chart()], None, branch_rule, False, ["x", "y", "px", "py"])


# ---------------------------------------------------------------------------
# guard-free LQR


def build_lqr(horizon: float = 1.0, x_box: tuple = (-2.0, 2.0), u_max: float = 3.0) -> OptimalControlProblem:
    """Scalar LQR ``x' = u, l = (u^2 + x^2)/2``, no guards, no terminal cost.

    Optimal Hamiltonian ``H = -p^2/2 + x^2/2`` with ``u* = -p``. The control
    box ``u_max`` only limits the DP control samples.
    """
    sys = HybridSystem(1, lambda t, x, u=None: np.array([0.0 if u is None else float(np.atleast_1d(u)[0])]), [], (np.array([x_box[0]]), np.array([x_box[1]])), False, ["x"])
    sys.field_batch = lambda X, U: np.stack([U + 0.0 * X[0]])
    ocp = OptimalControlProblem(
        system=sys,
        running_cost=lambda t, x, u: 0.5 * float(np.atleast_1d(u)[0]) ** 2 + 0.5 * float(x[0]) ** 2,
        horizon=(0.0, horizon),
        terminal_cost=lambda x: 0.0,
        terminal_gradient=lambda x: np.zeros(1),
        affine=(lambda t, x: np.zeros(1), lambda t, x: np.ones((1, 1))),
        quadratic_cost=(np.eye(1), lambda t, x: np.zeros(1)),
        hamiltonian=Hamiltonian(
            1,
            lambda t, x, p: -0.5 * p[0] ** 2 + 0.5 * x[0] ** 2,
            grad_x=lambda t, x, p: np.array([x[0]]),
            grad_p=lambda t, x, p: np.array([-p[0]]),
            hessian=lambda t, x, p: np.array([[1.0, 0.0], [0.0, -1.0]]),
            control=lambda t, x, p: np.array([-p[0]]),
            running_cost=lambda t, x, p: 0.5 * p[0] ** 2 + 0.5 * x[0] ** 2,
        ),
        name="lqr",
    )
    ocp.cost_batch = lambda X, U: 0.5 * U * U + 0.5 * X[0] ** 2
    ocp.dp_controls = (-u_max, u_max)
    return ocp


def riccati_value(x: float, t: float = 0.0, horizon: float = 1.0, rtol: float = 1e-13) -> float:
    """Riccati oracle ``V(t, x) = P(t) x^2 / 2`` with ``-P' = 1 - P^2, P(T) = 0``.

    Integrated numerically (DOP853) rather than taken from the tanh closed
    form, so the test compares against an independent computation.
    """
    from scipy.integrate import solve_ivp

    if t >= horizon:
        return 0.0
    sol = solve_ivp(lambda s, P: [1.0 - P[0] ** 2], (0.0, horizon - t), [0.0], method="DOP853", rtol=rtol, atol=1e-15)
    return 0.5 * float(sol.y[0, -1]) * x * x


def estimate_zeno_time(system: HybridSystem, x0, t_max: float, cfg: Optional[FlowConfig] = None) -> float:
    """Zeno time from simulation: detected impact times plus geometric extrapolation.

    Raises:
        SolverError: when no Zeno accumulation is detected before ``t_max``.
    """
    try:
        flow(system, x0, (0.0, t_max), cfg)
    except ZenoDetected as err:
        return float(err.info["t_zeno"])
    raise SolverError(f"no Zeno accumulation detected before t = {t_max}")
