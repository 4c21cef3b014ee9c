"""CSV artifacts: atomic writes, round-trip float format, ValueGrid bundles.

Every CSV has a header row. Floats are written with 17 significant digits so
that reading them back reproduces the binary value exactly.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .hjb_dp import ValueGrid

__all__ = [
    "fmt",
    "atomic_write_text",
    "write_csv",
    "read_csv",
    "write_json",
    "write_value_grid",
    "read_value_grid",
    "trajectory_rows",
    "events_rows",
]


def fmt(v) -> str:
    """Round-trip text form of a CSV cell."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def trajectory_rows(t: np.ndarray, X: np.ndarray) -> list[list]:
    return [[float(ti), *map(float, xi)] for ti, xi in zip(t, X)]


def events_rows(events, dim: int) -> list[list]:
    rows = []
    for k, e in enumerate(events):
        rows.append([k, e.t, *e.x_pre[:dim], *e.x_post[:dim], e.guard_id, e.beat_count])
    return rows


def write_value_grid(out_dir, grid: ValueGrid, names: Sequence[str], every: int = 1) -> list[str]:
    """ValueGrid bundle: ``axes.csv`` plus ``values_t{k}.csv``/``policy_t{k}.csv``.

    ``axes.csv`` lists ``(axis, index, value)`` for every state axis and for the
    time axis ``t``. Slice files hold one row per node, ``(i_<name>..., value)``
    in C order. Policy slices exist for ``k < K``; the final slice only has
    values. ``every`` thins the written slices (the final slice is always
    written).

    Returns:
        Names of the written files.
    """
    out_dir = Path(out_dir)
    files = ["axes.csv"]
    rows = []
    for name, a in zip(names, grid.axes):
        rows += [[name, i, v] for i, v in enumerate(a)]
    rows += [["t", k, v] for k, v in enumerate(grid.times)]
    write_csv(out_dir / "axes.csv", ["axis", "index", "value"], rows)
    idx = np.indices(grid.shape).reshape(len(grid.shape), -1).T
    header = [f"i_{n}" for n in names] + ["value"]
    K = grid.times.size - 1
    ks = sorted(set(range(0, K + 1, max(1, every))) | {K})
    for k in ks:
        v = grid.values[k].ravel()
        write_csv(out_dir / f"values_t{k}.csv", header, ([*ij, val] for ij, val in zip(idx, v)))
        files.append(f"values_t{k}.csv")
        if k < K:
            u = grid.policy[k].ravel()
            write_csv(out_dir / f"policy_t{k}.csv", header, ([*ij, val] for ij, val in zip(idx, u)))
            files.append(f"policy_t{k}.csv")
    return files


def read_value_grid(out_dir) -> ValueGrid:
    """Inverse of :func:`write_value_grid` for bundles written with ``every=1``."""
    out_dir = Path(out_dir)
    _, rows = read_csv(out_dir / "axes.csv")
    axes: dict[str, list] = {}
    for name, i, v in rows:
        axes.setdefault(name, []).append((int(i), float(v)))
    times = np.array([v for _, v in sorted(axes.pop("t"))])
    ax = [np.array([v for _, v in sorted(vals)]) for vals in axes.values()]
    shape = tuple(a.size for a in ax)
    K = times.size - 1

    def load(name):
        _, rr = read_csv(out_dir / name)
        arr = np.empty(shape)
        for r in rr:
            arr[tuple(int(c) for c in r[:-1])] = float(r[-1])
        return arr

    values = np.stack([load(f"values_t{k}.csv") for k in range(K + 1)])
    policy = np.stack([load(f"policy_t{k}.csv") for k in range(K)])
    return ValueGrid(ax, times, values, policy, np.array([]))
