"""Run configuration and the time loop with staggered erosion.

A run is configured by one TOML file. Sections and defaults::

    [voxels]        file = "grid.toml"                 # or a generator:
                    generator = "sphere", edge_voxels, edge_length (um),
                    sphere_diameter, layer_thickness, phase_ids = [matrix, layer, inclusion]
    [mesh]          cells_per_axis = 4, scheme = "T1min1-MT", threshold = 0.0,
                    cell_order = 2, switch_order = 1, allow_inconsistent = false
    [materials.<phase id>]  base = "nickel" and/or explicit parameters
    [loading]       velocity = 350.0 (mm/s) or strain_rate (1/min); symmetry = true,
                    initial_velocity = "zero" (or "affine")
    [time]          dt, n_steps
    [eigenerosion]  enabled = true, c = 0.5, r_tie = 1e-3, gc_scale = 1.0
    [solver]        tol = 1e-8, atol = 1e-12, c_norm = 1.0, max_iter = 25, inertia = true,
                    method = "condensed" (or "saddle")
    [newmark]       beta = 0.25, gamma = 0.5
    [initial_crack] lo = [..], hi = [..]   (um, optional)
    [output]        dir = "out", snapshot_every = 10, snapshots = true

Boundary conditions: u_x = 0 on x-, u_x = ubar(t) on x+; with symmetry
also u_y = 0 on y- and u_z = 0 on z-.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time as _time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli

from .decomposition import check_consistency, decompose_grid, decomposition_stats
from .eigenerosion import (CrackState, ErosionEvent, erosion_sweep, impose_initial_crack,
                           subcells_in_region, write_erosion_log)
from .fem import Newmark, SolverError, newton_solve
from .material import MaterialError, MaterialParams, params_from_dict
from .mesh import FCMMesh
from .voxel import CellGrid, VoxelGrid, generate_sphere_specimen, load_voxels

log = logging.getLogger(__name__)


class RunError(RuntimeError):
    pass


@dataclass
class VoxelSource:
    file: str | None = None
    generator: str | None = None
    edge_voxels: int = 16
    edge_length: float = 70.0
    sphere_diameter: float = 50.0
    layer_thickness: float = 5.0
    phase_ids: tuple = (0, 1, 2)


@dataclass
class MeshConfig:
    cells_per_axis: int | tuple = 4
    scheme: str = "T1min1-MT"
    threshold: float = 0.0
    cell_order: int = 2
    switch_order: int = 1
    allow_inconsistent: bool = False


@dataclass
class LoadingConfig:
    velocity: float | None = None      # mm/s on the x+ face
    strain_rate: float | None = None   # 1/min
    symmetry: bool = True
    initial_velocity: str = "zero"     # "zero" or "affine" (homogeneous stretch rate)

    def __post_init__(self):
        if self.initial_velocity not in ("zero", "affine"):
            raise ValueError(f"initial_velocity must be 'zero' or 'affine', got {self.initial_velocity!r}")
        if self.velocity is None and self.strain_rate is None:
            self.velocity = 0.0
        if self.velocity is not None and self.strain_rate is not None:
            raise ValueError("give either velocity or strain_rate, not both")


@dataclass
class TimeConfig:
    dt: float = 1e-6
    n_steps: int = 10

    @property
    def t_end(self) -> float:
        return self.n_steps * self.dt


@dataclass
class ErosionConfig:
    enabled: bool = True
    c: float = 0.5
    r_tie: float = 1e-3
    gc_scale: float = 1.0   # multiplies every catalog G_c (unit reading of the tables)


@dataclass
class SolverConfig:
    tol: float = 1e-8
    atol: float = 1e-12
    c_norm: float = 1.0
    max_iter: int = 25
    inertia: bool = True
    method: str = "condensed"   # or "saddle"


@dataclass
class OutputConfig:
    dir: str = "out"
    snapshot_every: int = 10
    snapshots: bool = True


@dataclass
class RunConfig:
    voxels: VoxelSource
    materials: dict
    mesh: MeshConfig = field(default_factory=MeshConfig)
    loading: LoadingConfig = field(default_factory=LoadingConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    eigenerosion: ErosionConfig = field(default_factory=ErosionConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    newmark: Newmark = field(default_factory=Newmark)
    initial_crack: dict | None = None
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "RunConfig":
        d = copy.deepcopy(d)
        known = {"voxels", "materials", "mesh", "loading", "time", "eigenerosion", "solver",
                 "newmark", "initial_crack", "output"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        if "materials" not in d or not d["materials"]:
            raise ValueError("config needs a [materials] catalog")
        mats = {int(k): params_from_dict(str(v.get("name", k)) if isinstance(v, dict) else str(k),
                                         {kk: vv for kk, vv in v.items() if kk != "name"})
                for k, v in d["materials"].items()}
        gc_scale = float(d.get("eigenerosion", {}).get("gc_scale", 1.0))
        if gc_scale != 1.0:
            mats = {k: replace(p, G_c=p.G_c * gc_scale) for k, p in mats.items()}
        vox = dict(d.get("voxels", {}))
        if "phase_ids" in vox:
            vox["phase_ids"] = tuple(vox["phase_ids"])
        cfg = cls(
            voxels=VoxelSource(**vox),
            materials=mats,
            mesh=MeshConfig(**d.get("mesh", {})),
            loading=LoadingConfig(**d.get("loading", {})),
            time=TimeConfig(**d.get("time", {})),
            eigenerosion=ErosionConfig(**d.get("eigenerosion", {})),
            solver=SolverConfig(**d.get("solver", {})),
            newmark=Newmark(**d.get("newmark", {})),
            initial_crack=d.get("initial_crack"),
            output=OutputConfig(**d.get("output", {})),
            base_dir=str(base_dir),
        )
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        with open(path, "rb") as fh:
            return cls.from_dict(tomli.load(fh), path.parent)

    def voxel_grid(self) -> VoxelGrid:
        v = self.voxels
        if v.file is not None:
            grid = load_voxels(Path(self.base_dir) / v.file, catalog=self.materials)
        elif v.generator == "sphere":
            grid = generate_sphere_specimen(v.edge_voxels, v.edge_length, v.sphere_diameter,
                                            v.layer_thickness, v.phase_ids)
        else:
            raise ValueError("voxels need either file or generator = 'sphere'")
        grid.validate(self.materials)
        return grid


@dataclass
class RunOutputs:
    reaction: list = field(default_factory=list)   # (step, t, ubar, strain, Q, n_eq, n_eroded)
    neq_trace: list = field(default_factory=list)  # (step, sweep, iteration, n_eq)
    erosion: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    eroded_counts: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    mesh: FCMMesh | None = None
    crack: CrackState | None = None

    @property
    def forces(self) -> np.ndarray:
        return np.array([r[4] for r in self.reaction])

    @property
    def strains(self) -> np.ndarray:
        return np.array([r[3] for r in self.reaction])


def build_mesh(cfg: RunConfig, grid: VoxelGrid | None = None):
    grid = grid or cfg.voxel_grid()
    cg = CellGrid.for_grid(grid.dims, cfg.mesh.cells_per_axis)
    layout = decompose_grid(grid, cg, cfg.mesh.scheme, cfg.mesh.threshold)
    mesh = FCMMesh(layout, np.array(grid.spacing) * 1e-3, cfg.materials, cfg.mesh.cell_order,
                   cfg.mesh.switch_order, cfg.newmark)
    return grid, layout, mesh


def boundary_rules(cfg: RunConfig, ubar: float):
    rules = [(0, 0, 0, 0.0), (0, 1, 0, ubar)]
    if cfg.loading.symmetry:
        rules += [(1, 0, 1, 0.0), (2, 0, 2, 0.0)]
    return rules


def prescribed_displacement(cfg: RunConfig, t: float, length_x: float) -> float:
    if cfg.loading.strain_rate is not None:
        return cfg.loading.strain_rate / 60.0 * length_x * t
    return cfg.loading.velocity * t


def reaction_force(mesh: FCMMesh, D: np.ndarray, dt: float, inertia: bool = True, axis: int = 0,
                   side: int = 1) -> float:
    """Summed x-reaction on a face; positive when the body is pulled."""
    R = mesh.out_of_balance(D, dt, inertia)
    nodes = mesh.face_nodes(axis, side)
    return float(R[3 * nodes + axis].sum())


def equation_count(mesh: FCMMesh) -> int:
    return mesh.equation_count()


def refined_equation_count(cfg: RunConfig, grid: VoxelGrid | None = None, only_heterogeneous: bool = False) -> int:
    """Equation count with every (or every multi-phase) cell switched."""
    grid, layout, mesh = build_mesh(cfg, grid)
    mesh.set_dirichlet(boundary_rules(cfg, 0.0))
    for c in range(mesh.cg.n_cells):
        if only_heterogeneous and len({s.phase for s in layout.cells[c]}) < 2:
            continue
        mesh.switch_cell(c)
    return mesh.equation_count()


class Simulation:
    """Stateful runner; :func:`run` is the one-call entry point."""

    def __init__(self, cfg: RunConfig, grid: VoxelGrid | None = None, out_dir: str | Path | None = None,
                 write: bool = True):
        self.cfg = cfg
        self.grid, self.layout, self.mesh = build_mesh(cfg, grid)
        self.write = write
        self.out_dir = Path(out_dir if out_dir is not None else Path(cfg.base_dir) / cfg.output.dir)
        self.consistency_violations = 0
        if cfg.eigenerosion.enabled:
            ok, bad = check_consistency(self.layout)
            self.consistency_violations = len(bad)
            if not ok and not cfg.mesh.allow_inconsistent:
                raise RunError(f"decomposition {cfg.mesh.scheme} is inconsistent "
                               f"({len(bad)} violations); refusing to switch cells")
            if not ok:
                log.warning("running on inconsistent decomposition %s (%d violations)",
                            cfg.mesh.scheme, len(bad))
        self.length_x = self.grid.extent[0] * 1e-3
        self.mesh.set_dirichlet(boundary_rules(cfg, 0.0))
        m = self.mesh
        if cfg.loading.initial_velocity == "affine":
            # start already stretching so the x+ face does not launch a shock wave
            rate = prescribed_displacement(cfg, 1.0, self.length_x)
            m.v[0::3] = rate * m.X[:, 0] / self.length_x
        self.h = float(m.layout.max_edge()) * 1e-3
        self.crack = CrackState.build(m.gp_X, m.gp_sub, m.gp_wdet, self.h, cfg.eigenerosion.c,
                                      n_entities=len(m.sc_lo))
        self.out = RunOutputs(mesh=m, crack=self.crack)
        self.step = 0
        self.t = 0.0

    # one converged equilibrium at the current topology
    def _equilibrium(self, dt: float, ubar: float, sweep: int):
        m, s = self.mesh, self.cfg.solver
        m.set_dirichlet(boundary_rules(self.cfg, ubar))
        D0 = m.apply_dirichlet(m.D)
        trace = self.out.neq_trace
        step = self.step

        def record(it, e, n_eq):
            trace.append((step, sweep, it, n_eq))

        try:
            res = newton_solve(lambda D: m.dynamic_system(D, dt, s.inertia), D0, m.constraints,
                               m.fixed_mask(), s.tol, s.c_norm, s.max_iter, s.atol, record,
                               method=s.method)
        except (SolverError, MaterialError, np.linalg.LinAlgError) as exc:
            log.warning("step %d: %s", step, exc)
            return False
        if not res.converged:
            log.warning("step %d: Newton not converged, errors %s", step, res.errors[-3:])
            return False
        m.D = res.D
        m.constraints.lam = res.lam
        return True

    def _advance(self, dt: float, t_new: float) -> bool:
        ubar = prescribed_displacement(self.cfg, t_new, self.length_x)
        if not self._equilibrium(dt, ubar, 0):
            return False
        if self.cfg.eigenerosion.enabled:
            sweep = 0
            limit = len(self.mesh.sc_lo)
            while sweep < limit:
                sweep += 1
                ev = erosion_sweep(self.mesh, self.crack, self.cfg.eigenerosion.r_tie, self.step, sweep)
                if not ev:
                    break
                self.out.erosion.extend(ev)
                log.debug("step %d sweep %d: %d eroded, n_eq %d", self.step, sweep, len(ev),
                          self.mesh.equation_count())
                self._snapshot(tag=f"e{len(self.out.erosion)}")
                if not self._equilibrium(dt, ubar, sweep):
                    return False
        Q = reaction_force(self.mesh, self.mesh.D, dt, self.cfg.solver.inertia)
        self.mesh.commit(self.mesh.D, dt, self.cfg.solver.inertia)
        self.t = t_new
        self._last = (ubar, Q)
        return True

    def _restore(self):
        m = self.mesh
        m.D = m.D_n.copy()
        m.state_trial = m.state_n.copy()

    def run_step(self):
        self.step += 1
        dt = self.cfg.time.dt
        t_new = self.step * dt
        if not self._advance(dt, t_new):
            self._restore()
            log.info("step %d: retrying with two half steps", self.step)
            ok = self._advance(0.5 * dt, self.t + 0.5 * dt) and self._advance(0.5 * dt, t_new)
            if not ok:
                self._restore()
                self._dump_failure()
                raise RunError(f"Newton failed at step {self.step} even with halved time step")
        ubar, Q = self._last
        n_eq = self.mesh.equation_count()
        self.out.reaction.append((self.step, self.t, ubar, ubar / self.length_x, Q, n_eq,
                                  len(self.crack.eroded)))
        self.out.eroded_counts.append(len(self.crack.eroded))
        log.debug("step %d: Q %.6g, n_eq %d, %d eroded", self.step, Q, n_eq, len(self.crack.eroded))
        if self.cfg.output.snapshot_every and self.step % self.cfg.output.snapshot_every == 0:
            self._snapshot(tag=f"s{self.step}")

    def _snapshot(self, tag: str):
        if not (self.write and self.cfg.output.snapshots):
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        p = self.out_dir / f"snap_{self.step:05d}_{tag}.vtk"
        self.mesh.write_vtk(p)
        self.out.snapshots.append(str(p))

    def _dump_failure(self):
        if not self.write:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        np.savez(self.out_dir / "failure_state.npz", D=self.mesh.D_n, v=self.mesh.v, a=self.mesh.a,
                 eroded=np.array(self.crack.eroded), alpha=self.mesh.state_n.alpha)
        self.write_outputs(failed=True)

    def initial_crack(self):
        ic = self.cfg.initial_crack
        if not ic:
            return
        lo = np.asarray(ic["lo"], dtype=float) * 1e-3
        hi = np.asarray(ic["hi"], dtype=float) * 1e-3
        sel = subcells_in_region(self.mesh, lo, hi)
        self.out.erosion.extend(impose_initial_crack(self.mesh, self.crack, sel))

    def run(self) -> RunOutputs:
        t0 = _time.perf_counter()
        self.initial_crack()
        self.out.summary["n_eq_initial"] = self.mesh.equation_count()
        self._snapshot(tag="init")
        for _ in range(self.cfg.time.n_steps):
            self.run_step()
        self.out.summary["runtime_s"] = _time.perf_counter() - t0
        if self.write:
            self.write_outputs()
        return self.out

    def summary(self, failed: bool = False) -> dict:
        F = self.out.forces
        s = dict(self.out.summary)
        s.update(
            scheme=self.cfg.mesh.scheme,
            steps=self.step,
            t_end=self.t,
            failed=failed,
            n_subcells=int(len(self.mesh.sc_lo)),
            n_eq_final=self.mesh.equation_count(),
            n_eroded=len(self.crack.eroded),
            peak_force=float(F.max()) if len(F) else 0.0,
            final_force=float(F[-1]) if len(F) else 0.0,
            eps=self.crack.eps,
            consistency_violations=self.consistency_violations,
            h=self.h,
        )
        return s

    def write_outputs(self, failed: bool = False):
        d = self.out_dir
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "reaction.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "ubar", "strain_xx", "Q_xx", "n_eq", "n_eroded"])
            for r in self.out.reaction:
                w.writerow([r[0]] + [repr(float(x)) for x in r[1:5]] + [r[5], r[6]])
        with open(d / "neq.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "sweep", "iteration", "n_eq"])
            w.writerows(self.out.neq_trace)
        write_erosion_log(self.out.erosion, d / "erosion.csv")
        summ = self.summary(failed)
        self.out.summary = summ
        with open(d / "summary.json", "w") as fh:
            json.dump(summ, fh, indent=2, sort_keys=True)


def run(cfg: RunConfig | str | Path, out_dir=None, write: bool = True, grid: VoxelGrid | None = None) -> RunOutputs:
    """Execute a configured simulation and write its outputs."""
    if not isinstance(cfg, RunConfig):
        cfg = RunConfig.load(cfg)
    return Simulation(cfg, grid=grid, out_dir=out_dir, write=write).run()


def eroded_voxel_mask(out: RunOutputs) -> np.ndarray:
    """Boolean voxel array marking the volume of eroded subcells."""
    m = out.mesh
    mask = np.zeros(tuple(m.dims), dtype=bool)
    for s in out.crack.eroded:
        a, b = m.sc_lo[s], m.sc_hi[s]
        mask[a[0]:b[0], a[1]:b[1], a[2]:b[2]] = True
    return mask


def crack_overlap(a: np.ndarray, b: np.ndarray) -> float:
    """Shared eroded volume relative to the smaller of the two crack volumes."""
    na, nb = int(a.sum()), int(b.sum())
    if min(na, nb) == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / min(na, nb))
