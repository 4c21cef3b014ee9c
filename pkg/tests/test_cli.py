import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hybrid_oc.artifacts import read_csv
from hybrid_oc.cli import compare_trajectories, main, validate_scenario
from hybrid_oc.errors import ValidationError

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def _write(tmp_path, scenario, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(scenario))
    return p


def _run(tmp_path, scenario, out="out", extra=()):
    p = _write(tmp_path, scenario)
    return main(["run", str(p), "--out", str(tmp_path / out), *extra])


BALL = {"model": {"id": "ball", "params": {"c": 0.9}}, "task": "simulate", "settings": {"x0": [1.0, 0.0], "t_span": [0, 3]}}


def test_simulate_writes_trajectory_and_events(tmp_path, capsys):
    assert _run(tmp_path, BALL) == 0
    line = capsys.readouterr().out.strip().splitlines()
    assert len(line) == 1 and line[0].startswith("simulate: ok")
    header, rows = read_csv(tmp_path / "out" / "events.csv")
    assert header == ["k", "t_k", "x_pre", "y_pre", "x_post", "y_post", "guard_id", "beat_count"]
    assert len(rows) == 2
    header, rows = read_csv(tmp_path / "out" / "trajectory.csv")
    assert header == ["t", "x", "y"]
    man = json.loads((tmp_path / "out" / "run.json").read_text())
    assert man["status"] == "ok" and man["summary"]["n_events"] == 2


def test_runs_are_byte_identical(tmp_path):
    assert _run(tmp_path, BALL, "a") == 0
    assert _run(tmp_path, BALL, "b") == 0
    for f in ("events.csv", "trajectory.csv", "run.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_schema_violation_exits_two(tmp_path, capsys):
    bad = dict(BALL, settings={"x0": [1.0, 0.0]})
    assert _run(tmp_path, bad) == 2
    assert "t_span" in capsys.readouterr().out


def test_unknown_parameter_exits_two(tmp_path):
    bad = dict(BALL, model={"id": "ball", "params": {"mass": 1.0}})
    assert _run(tmp_path, bad) == 2


def test_model_task_mismatch():
    with pytest.raises(ValidationError):
        validate_scenario({"model": {"id": "ball"}, "task": "dp"})


def test_parameter_range_exits_two(tmp_path):
    bad = {"model": {"id": "neuron", "params": {"I0": 0.5}}, "task": "lagrangian", "settings": {"seed": "fiber", "t": 0.1, "x0": [0.1, 0.1], "samples": [{"lo": 0, "hi": 1, "n": 2}] * 2}}
    assert _run(tmp_path, bad) == 2


def test_solver_failure_exits_three(tmp_path, capsys):
    sc = {"model": {"id": "mirror"}, "task": "shoot", "settings": {"x0": [0.0, -1.0], "mesh": {"lo": [-1, -1], "hi": [1, 1], "N": 3, "eps_terminal": 1e-12}}}
    assert _run(tmp_path, sc) == 3
    assert "NoCandidate" in capsys.readouterr().out
    man = json.loads((tmp_path / "out" / "run.json").read_text())
    assert man["status"] == "failed" and man["error"] == "NoCandidate"


def test_zeno_during_simulation_is_reported(tmp_path):
    sc = {"model": {"id": "ball", "params": {"c": 0.7071067811865476}}, "task": "simulate", "settings": {"x0": [0.0, 1.0], "t_span": [0, 3]}}
    assert _run(tmp_path, sc) == 0
    man = json.loads((tmp_path / "out" / "run.json").read_text())
    assert man["summary"]["status"] == "zeno_detected"
    assert man["summary"]["t_zeno"] == pytest.approx(2.0, abs=1e-6)


def test_zeno_task(tmp_path):
    sc = {"model": {"id": "ball", "params": {"c": 0.5}}, "task": "zeno", "settings": {"x0": [0.0, 1.0], "t_max": 3.0}}
    assert _run(tmp_path, sc) == 0
    header, rows = read_csv(tmp_path / "out" / "zeno.csv")
    t = np.array([[float(r[1]), float(r[3])] for r in rows])
    np.testing.assert_allclose(t[:, 0], t[:, 1], atol=1e-8)


def test_caustic_task_accepts_plain_ball(tmp_path):
    sc = {"model": {"id": "ball"}, "task": "caustic", "settings": {"x0": [1.0], "momenta": [0.0, 1.0], "t_window": [0, 4]}}
    assert _run(tmp_path, sc) == 0
    header, rows = read_csv(tmp_path / "out" / "caustic.csv")
    assert header == ["p0", "t_star", "x_star"]
    assert any(float(r[0]) == 0.0 and abs(float(r[1]) - 2.0) < 1e-6 for r in rows)


def test_dp_and_shoot_compare(tmp_path, capsys):
    dp = {"model": {"id": "lqr"}, "task": "dp", "settings": {"x0": [1.0], "write_every": 100}}
    sh = {"model": {"id": "lqr"}, "task": "shoot", "settings": {"x0": [1.0], "mesh": {"lo": [-3], "hi": [3], "N": 31, "refine": True}}}
    assert _run(tmp_path, dp, "dp") == 0
    assert _run(tmp_path, sh, "sh") == 0
    a, b = str(tmp_path / "dp"), str(tmp_path / "sh")
    assert main(["compare", a, b, "--metric", "sup", "--threshold", "0.05", "--out", str(tmp_path / "c.csv")]) == 0
    assert main(["compare", a, b, "--metric", "l2", "--threshold", "1e-9", "--out", str(tmp_path / "c.csv")]) == 1
    header, rows = read_csv(tmp_path / "c.csv")
    assert rows[0][-1] == "0"


def test_compare_rejects_different_models(tmp_path):
    assert _run(tmp_path, BALL, "ball") == 0
    sc = {"model": {"id": "lqr"}, "task": "simulate", "settings": {"x0": [1.0], "t_span": [0, 1]}}
    assert _run(tmp_path, sc, "lqr") == 0
    assert main(["compare", str(tmp_path / "ball"), str(tmp_path / "lqr"), "--out", str(tmp_path / "c.csv")]) == 2


def test_thread_override_must_be_integer(tmp_path, monkeypatch):
    monkeypatch.setenv("HYBRID_OC_THREADS", "many")
    assert main(["run", str(_write(tmp_path, BALL)), "--out", str(tmp_path / "o")]) == 2


def test_jump_aware_distance_ignores_small_event_shifts():
    t = np.linspace(0, 1, 1001)
    tA = np.concatenate([t[t <= 0.5], t[t >= 0.5]])
    xA = np.concatenate([np.zeros((t <= 0.5).sum()), np.ones((t >= 0.5).sum())])
    shift = 0.003
    xB = (tA >= 0.5 + shift).astype(float)
    assert compare_trajectories(tA, xA[:, None], tA, xB[:, None], "sup", slack=0.0) == 1.0
    assert compare_trajectories(tA, xA[:, None], tA, xB[:, None], "sup", slack=0.005) == 0.0


def test_bundled_scenarios_validate():
    for p in sorted(SCENARIOS.glob("*.json")):
        validate_scenario(json.loads(p.read_text()))


def test_console_entry_point(tmp_path):
    p = _write(tmp_path, BALL)
    r = subprocess.run([sys.executable, "-m", "hybrid_oc.cli", "run", str(p), "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("simulate: ok")
