import csv
import json

import numpy as np
import pytest
import tomli_w

from voxfrac.cli import main
from voxfrac.driver import (RunConfig, RunError, Simulation, build_mesh, boundary_rules,
                            crack_overlap, reaction_force, refined_equation_count, run)

ELASTIC = {"kappa": 150.0, "mu": 80.0, "y0": 1e12, "y_inf": 1e12, "G_c": 1e6, "rho0": 7000.0}
TABLE1 = {"0": {"base": "nickel"}, "1": {"base": "eta_carbide"}, "2": {"base": "tungsten_carbide"}}


def cube_config(**over):
    d = {"voxels": {"generator": "sphere", "edge_voxels": 4, "edge_length": 8.0, "sphere_diameter": 4.0,
                    "layer_thickness": 1.0, "phase_ids": [0, 0, 0]},
         "mesh": {"cells_per_axis": 2, "scheme": "T0"},
         "materials": {"0": dict(ELASTIC)},
         "loading": {"velocity": 1.0},
         "solver": {"inertia": False},
         "time": {"dt": 1e-5, "n_steps": 5},
         "output": {"snapshots": False}}
    for k, v in over.items():
        d.setdefault(k, {}).update(v)
    return d


def sphere_config(n_steps=10, **over):
    d = {"voxels": {"generator": "sphere", "edge_voxels": 8, "edge_length": 70.0,
                    "sphere_diameter": 50.0, "layer_thickness": 10.0},
         "mesh": {"cells_per_axis": 2, "scheme": "T1min1-MT", "allow_inconsistent": True, "cell_order": 1},
         "materials": TABLE1,
         "eigenerosion": {"gc_scale": 1e-3},
         "loading": {"velocity": 350.0, "initial_velocity": "affine"},
         "time": {"dt": 4e-9, "n_steps": n_steps},
         "output": {"snapshots": False}}
    for k, v in over.items():
        d.setdefault(k, {}).update(v)
    return d


# --- configuration ------------------------------------------------------------------------------

def test_config_unknown_section():
    with pytest.raises(ValueError, match="unknown config sections"):
        RunConfig.from_dict(dict(cube_config(), extra={}))


def test_config_needs_materials():
    d = cube_config()
    d["materials"] = {}
    with pytest.raises(ValueError):
        RunConfig.from_dict(d)


def test_config_loading_exclusive():
    with pytest.raises(ValueError):
        RunConfig.from_dict(cube_config(loading={"strain_rate": 1.0}))
    with pytest.raises(ValueError):
        RunConfig.from_dict(cube_config(loading={"initial_velocity": "ramp"}))


def test_config_gc_scale():
    cfg = RunConfig.from_dict(sphere_config())
    assert np.isclose(cfg.materials[0].G_c, 1.730e-3)
    assert np.isclose(cfg.materials[2].G_c, 0.0371e-3)


def test_config_unknown_field():
    with pytest.raises(TypeError):
        RunConfig.from_dict(cube_config(mesh={"cells": 3}))


def test_config_roundtrip_toml(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(tomli_w.dumps(cube_config()))
    cfg = RunConfig.load(p)
    assert cfg.mesh.scheme == "T0" and cfg.base_dir == str(tmp_path)
    assert cfg.materials[0].kappa == 150.0


def test_strain_rate_displacement():
    from voxfrac.driver import prescribed_displacement
    cfg = RunConfig.from_dict(cube_config(loading={"velocity": None, "strain_rate": 6.0}))
    # 6/min = 0.1/s on an 8 um bar for 2 s
    assert np.isclose(prescribed_displacement(cfg, 2.0, 8e-3), 0.1 * 8e-3 * 2.0)


# --- homogeneous elastic cube --------------------------------------------------------------

def test_elastic_cube_reaction_closed_form():
    cfg = RunConfig.from_dict(cube_config())
    out = run(cfg, write=False)
    E = cfg.materials[0].youngs
    A = (8e-3) ** 2
    for step, t, ubar, strain, Q, n_eq, n_er in out.reaction:
        lam = 1 + strain
        # uniaxial Kirchhoff stress is E ln(lam); the current area shrinks by lam_t^2 = J/lam
        exact = E * np.log(lam) / lam * A
        assert abs(Q - exact) <= 1e-6 * abs(exact)
        assert n_er == 0
    assert len({r[5] for r in out.reaction}) == 1


def test_action_reaction():
    cfg = RunConfig.from_dict(cube_config(time={"n_steps": 2}))
    sim = Simulation(cfg, write=False)
    sim.run()
    m = sim.mesh
    top = reaction_force(m, m.D, cfg.time.dt, inertia=False, side=1)
    bottom = reaction_force(m, m.D, cfg.time.dt, inertia=False, side=0)
    assert abs(top + bottom) <= 1e-9 * abs(top)


def test_zero_load_no_erosion():
    cfg = RunConfig.from_dict(sphere_config(n_steps=100, loading={"velocity": 0.0, "initial_velocity": "zero"}))
    out = run(cfg, write=False)
    assert out.eroded_counts == [0] * 100
    assert np.all(out.forces == 0)


# --- runs with erosion -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def eroding_runs(tmp_path_factory):
    cfg = sphere_config(n_steps=6)
    outs = []
    for name in ("a", "b"):
        d = tmp_path_factory.mktemp(name)
        outs.append((d, run(RunConfig.from_dict(cfg), out_dir=d)))
    return outs


def test_erosion_happens_and_is_monotone(eroding_runs):
    _, out = eroding_runs[0]
    counts = out.eroded_counts
    assert counts[-1] > 0
    assert all(b >= a for a, b in zip(counts, counts[1:]))
    ids = [e.entity for e in out.erosion]
    assert len(ids) == len(set(ids))
    assert sorted(ids) == sorted(out.crack.eroded)


def test_runs_deterministic(eroding_runs):
    (da, _), (db, _) = eroding_runs
    for name in ("reaction.csv", "erosion.csv", "neq.csv"):
        assert (da / name).read_text() == (db / name).read_text()


def test_outputs_written(eroding_runs):
    d, out = eroding_runs[0]
    with open(d / "reaction.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and set(rows[0]) == {"step", "t", "ubar", "strain_xx", "Q_xx", "n_eq", "n_eroded"}
    summ = json.loads((d / "summary.json").read_text())
    assert summ["n_eroded"] == len(out.crack.eroded)
    assert summ["consistency_violations"] > 0


def test_neq_trace_matches_mesh(eroding_runs):
    _, out = eroding_runs[0]
    m = out.mesh
    assert out.reaction[-1][5] == m.equation_count()
    assert out.reaction[-1][5] == int((~m.fixed_mask()).sum()) + len(m.constraints)


def test_crack_overlap():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros_like(a)
    a[1, :, :] = True
    b[1, :2, :] = True
    assert crack_overlap(a, b) == 1.0
    assert crack_overlap(a, np.zeros_like(a)) == 0.0


def test_quadratic_cells_linear_switch():
    d = sphere_config(n_steps=6)
    del d["mesh"]["cell_order"]
    cfg = RunConfig.from_dict(d)
    assert (cfg.mesh.cell_order, cfg.mesh.switch_order) == (2, 1)
    sim = Simulation(cfg, write=False)
    out = sim.run()
    m = sim.mesh
    assert np.all(np.isfinite(out.forces)) and out.eroded_counts[-1] > 0
    assert np.abs(m.constraints.matrix(3 * m.n_nodes) @ m.D).max() < 1e-12


# --- decomposition policy --------------------------------------------------------------------

def test_inconsistent_layout_refused():
    d = sphere_config()
    d["mesh"]["allow_inconsistent"] = False
    with pytest.raises(RunError, match="inconsistent"):
        Simulation(RunConfig.from_dict(d), write=False)


def test_consistent_layout_accepted():
    d = sphere_config(mesh={"scheme": "T1min1", "allow_inconsistent": False})
    sim = Simulation(RunConfig.from_dict(d), write=False)
    assert sim.consistency_violations == 0


def test_refined_count_reached_by_switching():
    cfg = RunConfig.from_dict(sphere_config())
    grid, _, mesh = build_mesh(cfg)
    mesh.set_dirichlet(boundary_rules(cfg, 0.0))
    n0 = mesh.equation_count()
    full = refined_equation_count(cfg)
    for c in range(mesh.cg.n_cells):
        mesh.switch_cell(c)
    assert mesh.equation_count() == full > n0


# --- CLI ----------------------------------------------------------------------------------------

def _write(tmp_path, d):
    p = tmp_path / "run.toml"
    p.write_text(tomli_w.dumps(d))
    return p


def test_cli_run(tmp_path, capsys):
    p = _write(tmp_path, cube_config())
    assert main(["run", str(p), "--out", str(tmp_path / "o"), "--steps", "2"]) == 0
    summ = json.loads(capsys.readouterr().out)
    assert summ["steps"] == 2 and (tmp_path / "o" / "reaction.csv").exists()


def test_cli_run_refused(tmp_path, capsys):
    d = sphere_config()
    d["mesh"]["allow_inconsistent"] = False
    assert main(["run", str(_write(tmp_path, d))]) == 2


def test_cli_decompose(tmp_path, capsys):
    p = _write(tmp_path, sphere_config())
    assert main(["decompose", str(p), "--stats", str(tmp_path / "s.csv"), "--schemes", "OD", "T1min1"]) == 0
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[2].startswith("T1min1,")


def test_cli_material_test(tmp_path):
    path = tmp_path / "path.csv"
    cols = ["t"] + [f"F{i}{j}" for i in range(1, 4) for j in range(1, 4)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(5):
            F = np.eye(3)
            F[0, 0] += 1e-3 * k
            w.writerow([1e-3 * k] + F.ravel().tolist())
    out = tmp_path / "resp.csv"
    assert main(["material-test", "nickel", "--path", str(path), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5 and float(rows[0]["tau11"]) == 0.0
    assert float(rows[-1]["alpha"]) > 0   # 0.4 % uniaxial strain yields nickel
