import os

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from hybrid_oc.artifacts import atomic_write_text, fmt, read_csv, read_value_grid, write_csv, write_value_grid
from hybrid_oc.hjb_dp import DPGrid, solve_dp
from hybrid_oc.models import build_neuron


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_cells_round_trip(x):
    assert float(fmt(x)) == x


def test_cell_formatting_of_other_types():
    assert fmt(True) == "1" and fmt(np.int64(7)) == "7" and fmt("S1_0") == "S1_0"


def test_atomic_write_leaves_no_temporaries(tmp_path):
    p = tmp_path / "sub" / "a.txt"
    atomic_write_text(p, "one")
    atomic_write_text(p, "two")
    assert p.read_text() == "two"
    assert os.listdir(p.parent) == ["a.txt"]


def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "x.csv", ["t", "x"], [[0.1, 1 / 3], [0.2, -2.5]])
    header, rows = read_csv(tmp_path / "x.csv")
    assert header == ["t", "x"]
    assert float(rows[0][1]) == 1 / 3


def test_value_grid_bundle_round_trip(tmp_path):
    g = solve_dp(build_neuron(), DPGrid.table1(n_nodes=8, n_controls=9, n_steps=12))
    files = write_value_grid(tmp_path, g, ["v1", "v2"])
    assert "axes.csv" in files and "values_t12.csv" in files and "policy_t12.csv" not in files
    back = read_value_grid(tmp_path)
    np.testing.assert_array_equal(back.values, g.values)
    np.testing.assert_array_equal(back.policy, g.policy)
    np.testing.assert_array_equal(back.times, g.times)
    for a, b in zip(back.axes, g.axes):
        np.testing.assert_array_equal(a, b)
