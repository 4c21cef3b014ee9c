"""Render figures from run directories written by ``hybrid-oc run``.

The toolkit itself only writes plot data (CSV). This script draws it:

    python3 docs/plot_runs.py runs/neuron_dp runs/neuron_shoot --out figures/

Requires the optional ``plots`` extra (matplotlib).
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _csv(path: Path):
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding=None)
    return np.atleast_1d(data)


def plot_run(run_dir: Path, out: Path) -> list[Path]:
    man = json.loads((run_dir / "run.json").read_text())
    written = []
    name = run_dir.name
    if "trajectory" in man:
        d = _csv(run_dir / man["trajectory"])
        names = man["state_names"]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for nm in names:
            ax.plot(d["t"], d[nm], label=nm)
        ax.set_xlabel("t")
        ax.legend()
        ax.set_title(f"{name}: trajectory")
        written.append(_save(fig, out / f"{name}_trajectory.png"))
        if len(names) == 2:
            fig, ax = plt.subplots(figsize=(4, 4))
            ax.plot(d[names[0]], d[names[1]], ".", ms=1)
            ax.set_xlabel(names[0])
            ax.set_ylabel(names[1])
            written.append(_save(fig, out / f"{name}_phase.png"))
    if (run_dir / "caustic.csv").exists():
        d = _csv(run_dir / "caustic.csv")
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(d["x_star"], d["t_star"], ".", ms=3)
        ax.set_xlabel("x")
        ax.set_ylabel("conjugate time")
        written.append(_save(fig, out / f"{name}_caustic.png"))
    if (run_dir / "zeno.csv").exists():
        d = _csv(run_dir / "zeno.csv")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.semilogy(d["k"], d["gap"], "o-")
        ax.set_xlabel("impact k")
        ax.set_ylabel("gap")
        written.append(_save(fig, out / f"{name}_zeno.png"))
    if (run_dir / "mesh.csv").exists() and len(man.get("state_names", [])) == 2:
        d = _csv(run_dir / "mesh.csv")
        N = int(round(np.sqrt(d.size)))
        R = np.log10(np.clip(d["residual"], 1e-16, 1e6)).reshape(N, N)
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(R.T, origin="lower", extent=[d["p1"].min(), d["p1"].max(), d["p2"].min(), d["p2"].max()], aspect="auto")
        fig.colorbar(im, label="log10 residual")
        ax.set_xlabel("p1(0)")
        ax.set_ylabel("p2(0)")
        written.append(_save(fig, out / f"{name}_mesh.png"))
    return written


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("runs", nargs="+", type=Path)
    ap.add_argument("--out", type=Path, default=Path("figures"))
    args = ap.parse_args(argv)
    for r in args.runs:
        for p in plot_run(r, args.out):
            print(p)


if __name__ == "__main__":
    main()
