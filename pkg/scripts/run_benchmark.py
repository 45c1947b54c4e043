"""Run the scaled sphere benchmarks and evaluate the crack criteria.

Writes per-run outputs under results/ and a summary results/benchmark.json.
Runs whose reaction.csv already exists are reused unless --force is given.

    python3 scripts/run_benchmark.py                 # all three runs
    python3 scripts/run_benchmark.py --only sphere_16_c4
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from voxfrac.analysis import curve_structure, separates
from voxfrac.driver import RunConfig, crack_overlap, eroded_voxel_mask, refined_equation_count, run

HERE = Path(__file__).resolve().parent
ROOT = HERE.parent
RUNS = ("sphere_16_c4", "sphere_32_c4", "sphere_32_c8")


def run_one(name: str, force: bool, steps: int | None):
    cfg = RunConfig.load(HERE / "configs" / f"{name}.toml")
    if steps is not None:
        cfg.time.n_steps = steps
    out_dir = ROOT / "results" / name
    if not force and (out_dir / "reaction.csv").exists() and (out_dir / "eroded.npy").exists():
        logging.info("%s: reusing %s", name, out_dir)
    else:
        t0 = time.perf_counter()
        out = run(cfg, out_dir=out_dir)
        np.save(out_dir / "eroded.npy", eroded_voxel_mask(out))
        logging.info("%s: %d steps in %.0f s, %d eroded", name, cfg.time.n_steps,
                     time.perf_counter() - t0, len(out.crack.eroded))
    with open(out_dir / "reaction.csv") as fh:
        rows = list(csv.DictReader(fh))
    summary = json.loads((out_dir / "summary.json").read_text())
    return cfg, rows, np.load(out_dir / "eroded.npy"), summary


def evaluate(results: dict) -> dict:
    report = {}
    if "sphere_16_c4" in results:
        cfg, rows, mask, summ = results["sphere_16_c4"]
        Q = np.array([float(r["Q_xx"]) for r in rows])
        st = curve_structure(Q)
        full = refined_equation_count(cfg)
        report["sphere_16_c4"] = dict(
            first_drop_step=st.first_drop, first_drop_rel=st.first_drop_rel, recovered=st.recovered,
            peak_step=st.peak, peak_force=float(Q[st.peak]), residual_force=st.residual,
            residual_rel=st.residual_rel, two_drops=st.two_drops, separated=separates(mask),
            n_eq_initial=summ["n_eq_initial"], n_eq_refined=full,
            efficiency_factor=full / summ["n_eq_initial"], runtime_s=summ.get("runtime_s"))
    if "sphere_32_c4" in results and "sphere_32_c8" in results:
        a, b = results["sphere_32_c4"][2], results["sphere_32_c8"][2]
        report["overlap_32"] = dict(overlap=crack_overlap(a, b), eroded_voxels_c4=int(a.sum()),
                                    eroded_voxels_c8=int(b.sum()),
                                    runtime_s=[results[k][3].get("runtime_s") for k in ("sphere_32_c4", "sphere_32_c8")])
    return report


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--only", nargs="*", choices=RUNS, default=list(RUNS))
    ap.add_argument("--steps", type=int, default=None, help="override the step count")
    ap.add_argument("--force", action="store_true", help="rerun even if results exist")
    ap.add_argument("-v", "--verbose", action="store_true", help="log every erosion sweep")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(message)s")
    results = {name: run_one(name, args.force, args.steps) for name in args.only}
    report = evaluate(results)
    out = ROOT / "results" / "benchmark.json"
    old = json.loads(out.read_text()) if out.exists() else {}
    old.update(report)
    out.write_text(json.dumps(old, indent=2, sort_keys=True))
    print(json.dumps(report, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
