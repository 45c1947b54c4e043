"""Command line entry point: ``voxfrac run|decompose|material-test``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .decomposition import decompose_grid, decomposition_stats, write_stats_csv
from .driver import RunConfig, RunError, run
from .material import CATALOG, material_point_path
from .voxel import CellGrid

F_COLUMNS = [f"F{i}{j}" for i in range(1, 4) for j in range(1, 4)]
TAU_COLUMNS = [f"tau{i}{j}" for i in range(1, 4) for j in range(1, 4)]


def _cmd_run(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.steps is not None:
        cfg.time.n_steps = args.steps
    try:
        out = run(cfg, out_dir=args.out)
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(out.summary, indent=2, sort_keys=True))
    return 0


def _cmd_decompose(args) -> int:
    cfg = RunConfig.load(args.config)
    grid = cfg.voxel_grid()
    cg = CellGrid.for_grid(grid.dims, cfg.mesh.cells_per_axis)
    schemes = args.schemes or [cfg.mesh.scheme]
    rows = []
    for tag in schemes:
        layout = decompose_grid(grid, cg, tag, cfg.mesh.threshold)
        rows.append(decomposition_stats(layout, cfg.mesh.switch_order))
        r = rows[-1]
        print(f"{r.scheme:>12s}  subcells={r.n_subcells:7d}  constraints={r.n_constraints:7d}  "
              f"aspect={r.max_aspect:5.1f}  consistent={r.consistent}")
    if args.stats:
        write_stats_csv(rows, args.stats)
    return 0


def read_strain_history(path: str | Path):
    """Read ``t, F11..F33`` rows; returns (t, F (n, 3, 3))."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = [c for c in ["t"] + F_COLUMNS if rows and c not in rows[0]]
    if not rows or missing:
        raise ValueError(f"{path}: need columns t, F11..F33 (missing {missing or 'all rows'})")
    t = np.array([float(r["t"]) for r in rows])
    F = np.array([[float(r[c]) for c in F_COLUMNS] for r in rows]).reshape(-1, 3, 3)
    return t, F


def _cmd_material_test(args) -> int:
    if args.phase not in CATALOG:
        print(f"error: unknown material {args.phase!r}; known: {', '.join(sorted(CATALOG))}",
              file=sys.stderr)
        return 2
    t, F = read_strain_history(args.path)
    dt = np.diff(t, prepend=0.0)
    if dt[0] <= 0:
        # a row at t = 0 still needs a step size for a rate-dependent phase
        dt[0] = dt[1] if len(dt) > 1 else 1.0
    if np.any(dt <= 0):
        print("error: time column must be strictly increasing", file=sys.stderr)
        return 2
    res = material_point_path(F, dt, CATALOG[args.phase])
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["t"] + TAU_COLUMNS + ["alpha", "psi_e", "psi_p", "d_vis"])
        for k in range(len(t)):
            w.writerow([repr(float(t[k]))] + [repr(float(x)) for x in res["tau"][k].ravel()]
                       + [repr(float(res[c][k])) for c in ("alpha", "psi_e", "psi_p", "d_vis")])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voxfrac", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a crack simulation from a TOML config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: [output] dir of the config)")
    p.add_argument("--steps", type=int, help="override the number of time steps")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("decompose", help="decompose the voxel grid of a config into subcells")
    p.add_argument("config")
    p.add_argument("--stats", help="write decomposition statistics to this CSV")
    p.add_argument("--schemes", nargs="+", help="scheme tags to compare (default: config scheme)")
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("material-test", help="drive one material point along a strain history")
    p.add_argument("phase", help="catalog material name")
    p.add_argument("--path", required=True, help="CSV with columns t, F11..F33")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.set_defaults(func=_cmd_material_test)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
