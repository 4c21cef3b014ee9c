import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_oc import GridTooCoarse, OutOfGrid
from hybrid_oc.hjb_dp import DPGrid, closed_loop, extract_policy, multilinear, solve_dp
from hybrid_oc.models import build_lqr, build_neuron, riccati_value


@pytest.fixture(scope="module")
def lqr_grid():
    return solve_dp(build_lqr(), DPGrid(lo=[-2.0], hi=[2.0], n_nodes=201, n_controls=241, n_steps=200))


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3),
    st.floats(0, 1), st.floats(-1, 2),
)
def test_multilinear_is_exact_on_affine_functions(a, b, c, y0, y1):
    axes = [np.linspace(0.0, 1.0, 7), np.linspace(-1.0, 2.0, 5)]
    X, Y = np.meshgrid(*axes, indexing="ij")
    V = a + b * X + c * Y
    got = multilinear(V, axes, np.array([[y0], [y1]]))[0]
    assert got == pytest.approx(a + b * y0 + c * y1, abs=1e-12)


def test_table_one_grid_dimensions():
    g = DPGrid.table1()
    assert (g.n_nodes, g.n_controls, g.n_steps) == ((150, 150), 150, 250)
    assert len(g.axes) == 2 and g.axes[0].size == 150


def test_lqr_value_near_riccati(lqr_grid):
    for x in (-1.0, 0.5, 1.0):
        assert lqr_grid.value(0.0, [x]) == pytest.approx(riccati_value(x), rel=0.02)


def test_terminal_slice_is_terminal_cost(lqr_grid):
    np.testing.assert_array_equal(lqr_grid.values[-1], 0.0)
    assert lqr_grid.policy.shape[0] == lqr_grid.times.size - 1


def test_policy_approximates_riccati_feedback(lqr_grid):
    # u*(0, x) = -tanh(T) x
    u = extract_policy(lqr_grid, 0.0, [1.0])
    assert u == pytest.approx(-np.tanh(1.0), abs=0.05)


def test_policy_query_outside_grid(lqr_grid):
    with pytest.raises(OutOfGrid):
        extract_policy(lqr_grid, 0.0, [3.0])
    assert np.isfinite(extract_policy(lqr_grid, 0.0, [3.0], clamp=True))


def test_closed_loop_cost_matches_value(lqr_grid):
    res = closed_loop(build_lqr(), lqr_grid, [1.0])
    assert res.cost == pytest.approx(riccati_value(1.0), rel=0.02)
    assert not res.arc.events


def test_coarse_time_step_is_rejected():
    with pytest.raises(GridTooCoarse):
        solve_dp(build_lqr(), DPGrid(lo=[-2.0], hi=[2.0], n_nodes=401, n_controls=11, n_steps=5))


def test_neuron_smoke_grid_structure():
    g = solve_dp(build_neuron(), DPGrid.table1(n_nodes=30, n_controls=30, n_steps=50))
    assert g.values.shape == (51, 30, 30)
    np.testing.assert_array_equal(g.values[-1], 0.0)
    assert np.all(np.isfinite(g.values))
    # the -2 (v1 - v2)^2 reward dominates away from the diagonal
    assert g.value(0.0, [0.2, 0.8]) < 0.0
