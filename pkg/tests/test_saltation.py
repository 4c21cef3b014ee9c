import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_oc import FlowConfig, Tangential, flow
from hybrid_oc.models import BouncingBallParams, build_ball, build_ball_extremal, build_mirror_extremal
from hybrid_oc.saltation import (
    augmented_differential,
    canonical_omega,
    caustic_trajectory,
    conjugate_points,
    event_saltation,
    propagate_variational,
    symplectic_defect,
    tangent_basis,
)


def _fd_flow_jacobian(system, x0, t_span, h=1e-6):
    x0 = np.asarray(x0, dtype=float)
    cols = []
    for e in np.eye(x0.size):
        a = flow(system, x0 + h * e, t_span).final_state
        b = flow(system, x0 - h * e, t_span).final_state
        cols.append((a - b) / (2 * h))
    return np.array(cols).T


@pytest.mark.parametrize("m", [1.0, 2.5])
def test_free_flight_transition_matrix(m):
    sys = build_ball(BouncingBallParams(m=m))
    tr = propagate_variational(sys, [5.0, 0.0], t_span=(0.2, 1.0))
    assert not tr.arc.events
    for t in (0.5, 1.0):
        np.testing.assert_allclose(tr.at(t).phi, [[1.0, (t - 0.2) / m], [0.0, 1.0]], atol=1e-10)


def test_elastic_bounce_saltation_matrix():
    sys = build_ball()
    arc = flow(sys, [1.0, 0.0], (0.0, 1.5))
    e = arc.events[0]
    S = event_saltation(sys, lambda t, x: sys.field(t, x), sys.guards[0], e.t, e.x_pre, e.x_post)
    y = e.x_pre[1]
    np.testing.assert_allclose(S, [[-1.0, 0.0], [-2 * 1.0 * 2.0 / y, -1.0]], atol=1e-8)


def test_variational_product_matches_finite_differences():
    sys = build_ball()
    tr = propagate_variational(sys, [1.0, 0.0], t_span=(0.0, 1.5))
    J = _fd_flow_jacobian(sys, [1.0, 0.0], (0.0, 1.5))
    np.testing.assert_allclose(tr.final.phi, J, rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(tr.final.phi, [[0.0, -0.5], [2.0, 1.0]], atol=1e-9)


def test_saltation_rejects_tangential_field():
    with pytest.raises(Tangential):
        augmented_differential(np.array([0.0, -2.0]), np.array([0.0, -2.0]), np.eye(2), np.array([1.0, 0.0]))


def test_identity_reset_with_continuous_field_has_identity_saltation():
    f = np.array([1.0, 2.0])
    S = augmented_differential(f, f, np.eye(2), np.array([0.3, 1.0])).matrix
    np.testing.assert_allclose(S, np.eye(2), atol=1e-14)


def test_tangent_basis_is_orthonormal_kernel():
    dh = np.array([1.0, -2.0, 0.5])
    E = tangent_basis(dh)
    assert E.shape == (3, 2)
    np.testing.assert_allclose(dh @ E, 0.0, atol=1e-14)
    np.testing.assert_allclose(E.T @ E, np.eye(2), atol=1e-14)


def test_symplectic_defect_of_canonical_matrices():
    W = canonical_omega(2)
    assert symplectic_defect(np.eye(4)) == (0.0, 0.0)
    d, _ = symplectic_defect(W)
    assert d < 1e-15
    with pytest.raises(ValueError):
        symplectic_defect(np.eye(3))


def test_conjugate_time_of_resting_extremal():
    es = build_ball_extremal()
    tr = propagate_variational(es, [1.0, 0.0], t_span=(0.0, 3.0))
    cps = conjugate_points(tr, (0.5, 3.0))
    assert cps and abs(cps[0]["t"] - 2.0) < 1e-6


def test_caustic_cloud_accumulates_near_two_and_a_half():
    es = build_ball_extremal()
    cloud = caustic_trajectory(es, [1.0], np.linspace(-1.0, 1.0, 21), (0.0, 4.0))
    ts = np.array([t for _, t, _ in cloud])
    assert np.any((ts >= 2.45) & (ts <= 2.55))


def test_damped_ball_transition_products_degenerate():
    P = BouncingBallParams(c=math.sqrt(0.5))
    sys = build_ball(P)
    t10 = 2 * (1 - 0.5**10)
    tr = propagate_variational(sys, [1e-300, 1.0], t_span=(0.0, t10 + 0.5 * 0.5**10), cfg=FlowConfig(detect_zeno=False))
    dets = [abs(np.linalg.det(tr.at(e.t).phi)) for e in tr.arc.events]
    assert all(b < a for a, b in zip(dets, dets[1:]))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 2.0), st.floats(-2.0, 2.0), st.floats(0.5, 2.0))
def test_ball_extremal_flow_is_symplectic(x0, p0, extra):
    es = build_ball_extremal()
    t_hit = (p0 + math.sqrt(p0 * p0 + 4 * x0)) / 2.0  # m = 1, g = 2
    tr = propagate_variational(es, [x0, p0], t_span=(0.0, t_hit + extra))
    assert len(tr.arc.events) >= 1
    d, det = symplectic_defect(tr.final)
    assert d < 1e-7 and det < 1e-7


@settings(max_examples=25, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, -0.1), st.floats(-1.0, 1.0), st.floats(0.3, 2.0))
def test_mirror_extremal_flow_is_symplectic(x, y, px, py):
    es = build_mirror_extremal()
    T = -y / py + 0.5
    tr = propagate_variational(es, [x, y, px, py], t_span=(0.0, T))
    assert len(tr.arc.events) == 1
    d, _ = symplectic_defect(tr.final)
    assert d < 1e-7
