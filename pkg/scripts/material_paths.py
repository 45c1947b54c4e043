"""Drive one material point of every catalog phase through uniaxial and shear paths.

Prints peak Kirchhoff stress, final equivalent plastic strain and dissipation;
optionally writes the full histories as CSV (one file per phase and path).
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from voxfrac.material import CATALOG, material_point_path


def paths(n: int, strain: float):
    s = np.linspace(0.0, strain, n + 1)[1:]
    uni = np.array([np.diag([1 + e, 1.0, 1.0]) for e in s])
    shear = np.array([np.diag([np.exp(e), np.exp(-e), 1.0]) for e in s])
    return {"uniaxial": uni, "shear": shear}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--strain", type=float, default=0.02)
    ap.add_argument("--rate", type=float, default=1e3, help="strain rate in 1/s")
    ap.add_argument("--out", type=Path, default=None, help="directory for CSV histories")
    args = ap.parse_args(argv)
    dt = args.strain / args.steps / args.rate
    print(f"{'phase':>18s} {'path':>9s} {'max |tau| MPa':>14s} {'alpha':>10s} {'D_vis MPa':>10s}")
    for name, p in CATALOG.items():
        for tag, F in paths(args.steps, args.strain).items():
            r = material_point_path(F, np.full(len(F), dt), p)
            print(f"{name:>18s} {tag:>9s} {np.abs(r['tau']).max():14.1f} {r['alpha'][-1]:10.3e} "
                  f"{r['d_vis'][-1]:10.3e}")
            if args.out:
                args.out.mkdir(parents=True, exist_ok=True)
                with open(args.out / f"{name}_{tag}.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["step", "tau11", "tau22", "tau12", "alpha", "psi_e", "psi_p", "d_vis"])
                    for k in range(len(F)):
                        t = r["tau"][k]
                        w.writerow([k + 1, t[0, 0], t[1, 1], t[0, 1], r["alpha"][k], r["psi_e"][k],
                                    r["psi_p"][k], r["d_vis"][k]])


if __name__ == "__main__":
    main()
