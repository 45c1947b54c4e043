"""Finite-cell mesh with switchable cells, hanging-node constraints and
erodible elements.

Geometry lives on an integer lattice in half-voxel units, so node
positions are deduplicated exactly. A *unit* is anything that contributes
element arrays: an active finite cell (integrated over its subcells) or a
finite element that replaced one subcell after its cell was switched.
Gauss points belong to subcells and never move; a unit owns a contiguous
range of them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .decomposition import SubcellLayout
from .fem import (ConstraintSet, Newmark, default_quadrature, gauss_rule, gp_response, node_lattice,
                  shape_eval)
from .material import GaussPointState, MaterialParams

log = logging.getLogger(__name__)

WEIGHT_DROP = 1e-13
GP_CHUNK = 4096


@dataclass
class Unit:
    kind: str              # "cell" or "element"
    cell: int
    lo: np.ndarray         # voxel box, global indices
    hi: np.ndarray
    order: int
    nodes: np.ndarray
    subcells: np.ndarray
    gp0: int
    gp1: int
    active: bool = True
    eroded: bool = False

    @property
    def intact(self) -> bool:
        return self.active and not self.eroded


@dataclass
class SwitchedRegion:
    cell: int
    elements: list
    new_nodes: np.ndarray
    constraint_rows_before: int
    constraint_rows_after: int
    subcell_to_element: dict


@dataclass
class Assembly:
    K: sp.csr_matrix | None
    f_int: np.ndarray
    gp_energy: np.ndarray   # energy per Gauss point (density times volume)


class FCMMesh:
    """Mutable finite-cell / finite-element mesh over a decomposed voxel grid.

    Parameters
    ----------
    layout
        Subcell decomposition of every cell.
    spacing
        Voxel edge lengths in mm.
    materials
        Phase id to :class:`MaterialParams`.
    cell_order, switch_order
        Polynomial order of cells and of elements created by switching.
    """

    def __init__(self, layout: SubcellLayout, spacing, materials: dict[int, MaterialParams],
                 cell_order: int = 1, switch_order: int = 1, newmark: Newmark | None = None):
        self.layout = layout
        self.cg = layout.cell_grid
        self.h = np.asarray(spacing, dtype=float)
        self.dims = np.array(self.cg.dims)
        self.materials = dict(materials)
        self.cell_order = cell_order
        self.switch_order = switch_order
        self.quad = default_quadrature(cell_order)
        self.newmark = newmark or Newmark()

        lo, hi, ph, cell = layout.global_boxes()
        missing = set(np.unique(ph).tolist()) - set(self.materials)
        if missing:
            raise KeyError(f"phases {sorted(missing)} have no material parameters")
        self.sc_lo, self.sc_hi, self.sc_phase, self.sc_cell = lo, hi, ph, cell
        nsc = len(lo)
        pts, w = gauss_rule(self.quad)
        q = len(w)
        self.n_gp = nsc * q
        self.gp_xi_sc = np.tile(pts, (nsc, 1))
        ext = (hi - lo).astype(float)
        self.gp_vox = (lo[:, None, :] + 0.5 * (pts[None] + 1.0) * ext[:, None, :]).reshape(-1, 3)
        self.gp_X = self.gp_vox * self.h
        self.gp_wdet = (w[None, :] * np.prod(0.5 * ext * self.h, axis=1)[:, None]).ravel()
        self.gp_sub = np.repeat(np.arange(nsc), q)
        self.gp_phase = ph[self.gp_sub]
        self.sc_gp0 = np.arange(nsc) * q
        self.gp_per_sc = q

        self.state_n = GaussPointState.virgin(self.n_gp)
        self.state_trial = self.state_n.copy()
        self.gp_energy = np.zeros(self.n_gp)

        self._node_id: dict[tuple, int] = {}
        self._node_q: list = []
        self.units: list[Unit] = []
        self.cell_unit = np.zeros(self.cg.n_cells, dtype=np.int64)
        self.sc_unit = np.zeros(nsc, dtype=np.int64)
        if np.any(np.diff(cell) < 0):
            raise ValueError("layout subcells must be ordered by cell")
        starts = np.searchsorted(cell, np.arange(self.cg.n_cells))
        stops = np.searchsorted(cell, np.arange(self.cg.n_cells), side="right")
        for c in range(self.cg.n_cells):
            o = self.cg.cell_origin(c)
            clo, chi = o, o + np.array(self.cg.voxels_per_cell)
            subs = np.arange(starts[c], stops[c])
            uid = self._add_unit("cell", c, clo, chi, cell_order, subs)
            self.cell_unit[c] = uid
            self.sc_unit[subs] = uid
        n = len(self._node_q)
        self.D = np.zeros(3 * n)
        self.D_n = np.zeros(3 * n)
        self.v = np.zeros(3 * n)
        self.a = np.zeros(3 * n)
        self.dirichlet: list[tuple[int, int, int, float]] = []
        self.lam_store: dict[tuple[int, int], float] = {}
        self._shape_cache: dict[int, tuple] = {}
        self._weight_cache: dict[tuple, tuple] = {}
        self._plan = None
        self._M = None
        self._refresh_topology()

    # --- topology -------------------------------------------------------------------

    @property
    def node_q(self) -> np.ndarray:
        """Node positions in half-voxel lattice units."""
        return np.array(self._node_q, dtype=np.int64).reshape(-1, 3)

    @property
    def X(self) -> np.ndarray:
        """Reference node coordinates in mm."""
        return 0.5 * self.node_q * self.h

    @property
    def n_nodes(self) -> int:
        return len(self._node_q)

    def _get_node(self, q) -> tuple[int, bool]:
        key = tuple(int(v) for v in q)
        nid = self._node_id.get(key)
        if nid is not None:
            return nid, False
        nid = len(self._node_q)
        self._node_id[key] = nid
        self._node_q.append(key)
        return nid, True

    def _unit_lattice(self, lo, hi, order):
        lat = node_lattice(order)
        return 2 * lo[None, :] + (2 * (hi - lo))[None, :] * lat // order

    def _add_unit(self, kind, cell, lo, hi, order, subs):
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        if np.any((2 * (hi - lo)) % order):
            raise ValueError("unit box incompatible with node lattice")
        ids = []
        new = []
        for q in self._unit_lattice(lo, hi, order):
            nid, created = self._get_node(q)
            ids.append(nid)
            if created:
                new.append(nid)
        subs = np.asarray(subs, dtype=np.int64)
        gp0 = int(self.sc_gp0[subs[0]])
        gp1 = int(self.sc_gp0[subs[-1]] + self.gp_per_sc)
        u = Unit(kind, int(cell), lo, hi, order, np.array(ids, dtype=np.int64), subs, gp0, gp1)
        self.units.append(u)
        self._last_new_nodes = new
        return len(self.units) - 1

    def _refresh_topology(self):
        self.node_active = np.zeros(self.n_nodes, dtype=bool)
        for u in self.units:
            if u.active:
                self.node_active[u.nodes] = True
        self._plan = None
        self._M = None
        self.rebuild_constraints()

    def _grow(self, n_new_total):
        extra = 3 * n_new_total - len(self.D)
        if extra > 0:
            z = np.zeros(extra)
            self.D = np.concatenate([self.D, z])
            self.D_n = np.concatenate([self.D_n, z])
            self.v = np.concatenate([self.v, z])
            self.a = np.concatenate([self.a, z])

    def unit_shape_at(self, uid: int, vox: np.ndarray):
        """Shape values and physical gradients of unit ``uid`` at voxel-unit points."""
        u = self.units[uid]
        ext = (u.hi - u.lo).astype(float)
        xi = -1.0 + 2.0 * (np.asarray(vox, dtype=float) - u.lo) / ext
        N, dN = shape_eval(u.order, xi)
        return N, dN * (2.0 / (ext * self.h))[None, None, :]

    def _unit_gp_shape(self, uid: int):
        hit = self._shape_cache.get(uid)
        if hit is not None:
            return hit
        u = self.units[uid]
        if u.kind == "element":
            ext = (u.hi - u.lo).astype(float)
            N, dN = shape_eval(u.order, self.gp_xi_sc[u.gp0:u.gp1])
            dNdX = dN * (2.0 / (ext * self.h))[None, None, :]
        else:
            N, dNdX = self.unit_shape_at(uid, self.gp_vox[u.gp0:u.gp1])
        self._shape_cache[uid] = (N, dNdX)
        return N, dNdX

    def switch_cell(self, c: int) -> SwitchedRegion:
        """Replace active cell ``c`` by one element per subcell."""
        uid = int(self.cell_unit[c])
        cu = self.units[uid]
        if not cu.active or cu.kind != "cell":
            raise ValueError(f"cell {c} is already switched")
        rows_before = len(self.constraints)
        n_before = self.n_nodes
        was_active = self.node_active.copy()
        elems = []
        mapping = {}
        for s in cu.subcells:
            eid = self._add_unit("element", c, self.sc_lo[s], self.sc_hi[s], self.switch_order, [s])
            elems.append(eid)
            mapping[int(s)] = eid
            self.sc_unit[s] = eid
        touched = np.unique(np.concatenate([self.units[e].nodes for e in elems]))
        new_nodes = touched[(touched >= n_before) | ~was_active[np.minimum(touched, n_before - 1)]]
        self._grow(self.n_nodes)
        if len(new_nodes):
            vox = 0.5 * self.node_q[new_nodes]
            N, _ = self.unit_shape_at(uid, vox)
            dofs = self.unit_dofs(uid)
            for vec in (self.D, self.D_n, self.v, self.a):
                vals = N @ vec[dofs].reshape(-1, 3)
                vec.reshape(-1, 3)[new_nodes] = vals
        cu.active = False
        self._refresh_topology()
        return SwitchedRegion(c, elems, new_nodes, rows_before, len(self.constraints), mapping)

    def erode_subcell(self, s: int) -> tuple[int, bool]:
        """Erode subcell ``s``; switches its cell first if needed.

        Returns ``(element id, switched)``.
        """
        uid = int(self.sc_unit[s])
        switched = False
        if self.units[uid].kind == "cell":
            self.switch_cell(self.units[uid].cell)
            uid = int(self.sc_unit[s])
            switched = True
        u = self.units[uid]
        if u.eroded:
            raise ValueError(f"subcell {s} already eroded")
        u.eroded = True
        self.gp_energy[u.gp0:u.gp1] = 0.0
        self._refresh_topology()
        return uid, switched

    def is_eroded(self, s) -> bool:
        return self.units[int(self.sc_unit[s])].eroded

    @property
    def eroded_subcells(self) -> np.ndarray:
        return np.array([self.units[int(u)].eroded for u in self.sc_unit], dtype=bool)

    def unit_dofs(self, uid: int) -> np.ndarray:
        n = self.units[uid].nodes
        return (3 * n[:, None] + np.arange(3)[None, :]).ravel()

    # --- constraints ----------------------------------------------------------------

    def _cells_touching(self, q: np.ndarray):
        """Pairs (node row, cell index) where the node lies in the closed cell box."""
        S = 2 * np.array(self.cg.voxels_per_cell)
        ncell = np.array(self.cg.cells_per_axis)
        base = q // S
        rows, cells = [], []
        for off in np.ndindex(2, 2, 2):
            off = np.array(off)
            c = base - off
            ok = np.all((c >= 0) & (c < ncell), axis=1)
            ok &= np.all((off == 0) | (q % S == 0), axis=1)
            r = np.flatnonzero(ok)
            rows.append(r)
            cc = c[r]
            cells.append(cc[:, 0] + ncell[0] * (cc[:, 1] + ncell[1] * cc[:, 2]))
        return np.concatenate(rows), np.concatenate(cells)

    def hanging_pairs(self):
        """(node, unit) pairs: node inside the closed box of intact unit but not its node."""
        act = np.flatnonzero(self.node_active)
        q = self.node_q[act]
        rows, cells = self._cells_touching(q)
        units_by_cell: dict[int, list[int]] = {}
        for i, u in enumerate(self.units):
            if u.intact:
                units_by_cell.setdefault(u.cell, []).append(i)
        order = np.argsort(cells, kind="stable")
        rows, cells = rows[order], cells[order]
        bounds = np.flatnonzero(np.diff(cells)) + 1
        pairs = []
        for seg_r, seg_c in zip(np.split(rows, bounds), np.split(cells, bounds)):
            if not len(seg_c):
                continue
            uids = units_by_cell.get(int(seg_c[0]))
            if not uids:
                continue
            lo2 = np.array([2 * self.units[i].lo for i in uids])
            hi2 = np.array([2 * self.units[i].hi for i in uids])
            p = np.array([self.units[i].order for i in uids])
            Q = q[seg_r]
            inside = np.all((Q[:, None, :] >= lo2[None]) & (Q[:, None, :] <= hi2[None]), axis=2)
            onlat = np.all(((Q[:, None, :] - lo2[None]) * p[None, :, None]) % (hi2 - lo2)[None] == 0, axis=2)
            ii, jj = np.nonzero(inside & ~onlat)
            pairs.extend(zip(act[seg_r[ii]].tolist(), [uids[j] for j in jj]))
        return sorted(set(pairs))

    def downgrade_pairs(self):
        """(node, unit) pairs where a quadratic unit meets a linear one at a shared node.

        The minimum rule: a non-corner boundary node of an intact order-2 unit
        that is also a node of an intact order-1 unit follows the linear
        interpolation of the order-2 unit's corners, so both sides see the
        same bilinear trace.
        """
        quad = {i for i, u in enumerate(self.units) if u.intact and u.order == 2}
        lin = [u.nodes for u in self.units if u.intact and u.order == 1]
        if not quad or not lin:
            return []
        nodes = np.unique(np.concatenate(lin))
        q = self.node_q[nodes]
        rows, cells = self._cells_touching(q)
        quad_by_cell: dict[int, list[int]] = {}
        for i in quad:
            quad_by_cell.setdefault(self.units[i].cell, []).append(i)
        pairs = set()
        for r, c in zip(rows.tolist(), cells.tolist()):
            for i in quad_by_cell.get(c, ()):
                u = self.units[i]
                lo2, hi2, x = 2 * u.lo, 2 * u.hi, q[r]
                if np.any(x < lo2) or np.any(x > hi2):
                    continue
                at_lo, at_hi = x == lo2, x == hi2
                on_bnd = np.any(at_lo | at_hi)
                corner = np.all(at_lo | at_hi)
                if on_bnd and not corner and np.all((2 * (x - lo2)) % (hi2 - lo2) == 0):
                    pairs.add((int(nodes[r]), i))
        return sorted(pairs)

    def _linear_weights(self, node: int, uid: int):
        """Trilinear corner weights of unit ``uid`` at ``node``."""
        u = self.units[uid]
        t = (self.node_q[node] - 2 * u.lo) / (2.0 * (u.hi - u.lo))
        nq = self.node_q[u.nodes]
        corner = np.all((nq == 2 * u.lo) | (nq == 2 * u.hi), axis=1)
        cn = u.nodes[corner]
        side = (nq[corner] == 2 * u.hi)
        w = np.prod(np.where(side, t, 1.0 - t), axis=1)
        keep = w > WEIGHT_DROP
        return cn[keep], w[keep] / w[keep].sum()

    def _weights(self, node: int, uid: int):
        return self._weights_batch([node], uid)[0]

    def _weights_batch(self, nodes, uid: int):
        """Normalised nonzero shape weights of unit ``uid`` at each node (cached)."""
        cache = self._weight_cache
        todo = [n for n in nodes if (uid, n) not in cache]
        if todo:
            N, _ = self.unit_shape_at(uid, 0.5 * self.node_q[np.asarray(todo)])
            unit_nodes = self.units[uid].nodes
            for n, row in zip(todo, N):
                keep = np.abs(row) > WEIGHT_DROP
                w = row[keep]
                cache[(uid, n)] = (unit_nodes[keep], w / w.sum())
        return [cache[(uid, n)] for n in nodes]

    def rebuild_constraints(self):
        """Recompute all hanging-node rows; multipliers carry over per (node, component)."""
        if hasattr(self, "constraints") and len(self.constraints):
            for r in range(len(self.constraints)):
                d = int(self.constraints.hanging[r])
                self.lam_store[(d // 3, d % 3)] = float(self.constraints.lam[r])
        pairs = self.hanging_pairs()
        down = self.downgrade_pairs()
        hanging = {n for n, _ in pairs} | {n for n, _ in down}
        is_hanging = np.zeros(self.n_nodes, dtype=bool)
        is_hanging[list(hanging)] = True
        by_unit: dict[int, list[int]] = {}
        for n, uid in pairs:
            by_unit.setdefault(uid, []).append(n)
        best: dict[int, tuple] = {}
        for uid, nodes in by_unit.items():
            for n, (masters, w) in zip(nodes, self._weights_batch(nodes, uid)):
                self._consider_master(best, n, uid, masters, w, is_hanging)
        for n, uid in down:
            masters, w = self._linear_weights(n, uid)
            self._consider_master(best, n, uid, masters, w, is_hanging)
        self._finish_constraints(best)

    def _consider_master(self, best, n, uid, masters, w, is_hanging):
        chained = bool(is_hanging[masters].any())
        u = self.units[uid]
        vol = int(np.prod(u.hi - u.lo))
        key = (chained, -vol, uid)
        if n not in best or key < best[n][0]:
            best[n] = (key, masters, w)

    def _finish_constraints(self, best):
        n_before = len(getattr(self, "chained_nodes", []))
        self.chained_nodes = [n for n, b in best.items() if b[0][0]]
        if len(self.chained_nodes) > n_before:
            log.info("%d hanging nodes depend on other hanging nodes", len(self.chained_nodes))
        fixed = self.fixed_mask(include_inactive=False)
        rows, lam = [], []
        for n in sorted(best):
            _, masters, w = best[n]
            for comp in range(3):
                d = 3 * n + comp
                if fixed[d]:
                    continue
                rows.append((d, list(zip((3 * masters + comp).tolist(), w.tolist()))))
                lam.append(self.lam_store.get((n, comp), 0.0))
        self.constraints = ConstraintSet.from_rows(rows, lam)
        self.hanging_nodes = np.array(sorted(best), dtype=np.int64)

    # --- boundary conditions ------------------------------------------------------

    def face_nodes(self, axis: int, side: int) -> np.ndarray:
        """Active nodes on the low (side 0) or high (side 1) boundary face."""
        target = 0 if side == 0 else 2 * self.dims[axis]
        q = self.node_q
        return np.flatnonzero(self.node_active & (q[:, axis] == target))

    def set_dirichlet(self, rules):
        """``rules``: iterable of ``(axis, side, component, value)``."""
        rules = [tuple(r) for r in rules]
        same = [r[:3] for r in rules] == [r[:3] for r in self.dirichlet]
        self.dirichlet = rules
        if not same:
            self.rebuild_constraints()

    def dirichlet_dofs(self):
        dofs, vals = [], []
        for axis, side, comp, val in self.dirichlet:
            nodes = self.face_nodes(axis, side)
            dofs.append(3 * nodes + comp)
            vals.append(np.full(len(nodes), float(val)))
        if not dofs:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        dofs = np.concatenate(dofs)
        vals = np.concatenate(vals)
        _, first = np.unique(dofs, return_index=True)
        return dofs[first], vals[first]

    def fixed_mask(self, include_inactive: bool = True) -> np.ndarray:
        m = np.zeros(3 * self.n_nodes, dtype=bool)
        if hasattr(self, "dirichlet"):
            d, _ = self.dirichlet_dofs()
            m[d] = True
        if include_inactive:
            m |= ~np.repeat(self.node_active, 3)
        return m

    def apply_dirichlet(self, D: np.ndarray, scale: float = 1.0) -> np.ndarray:
        D = D.copy()
        d, v = self.dirichlet_dofs()
        D[d] = scale * v
        return D

    def equation_count(self) -> int:
        """Size of the constrained linear system at the current topology."""
        return int(np.count_nonzero(~self.fixed_mask()) + len(self.constraints))

    # --- assembly -------------------------------------------------------------------

    def _build_plan(self):
        groups = {}
        for i, u in enumerate(self.units):
            if u.intact:
                groups.setdefault(u.order, []).append(i)
        plan = []
        for order, uids in sorted(groups.items()):
            chunks, cur, cur_n = [], [], 0
            for uid in uids:
                m = self.units[uid].gp1 - self.units[uid].gp0
                if cur and cur_n + m > GP_CHUNK:
                    chunks.append(cur)
                    cur, cur_n = [], 0
                cur.append(uid)
                cur_n += m
            if cur:
                chunks.append(cur)
            for ch in chunks:
                gp = np.concatenate([np.arange(self.units[u].gp0, self.units[u].gp1) for u in ch])
                counts = np.array([self.units[u].gp1 - self.units[u].gp0 for u in ch])
                seg = np.concatenate([[0], np.cumsum(counts)[:-1]])
                local = np.repeat(np.arange(len(ch)), counts)
                dNdX = np.concatenate([self._unit_gp_shape(u)[1] for u in ch])
                dofs = np.array([self.unit_dofs(u) for u in ch])
                plan.append(dict(units=ch, gp=gp, seg=seg, local=local, dNdX=dNdX, dofs=dofs,
                                 phases=np.unique(self.gp_phase[gp])))
        self._plan = plan

    def mass_matrix(self) -> sp.csr_matrix:
        """Consistent mass for intact units, row-sum lumped for eroded ones."""
        if self._M is not None:
            return self._M
        ndof = 3 * self.n_nodes
        rows, cols, vals = [], [], []
        rho_gp = np.array([self.materials[int(p)].rho for p in self.gp_phase]) if self.n_gp else np.zeros(0)
        for i, u in enumerate(self.units):
            if not u.active:
                continue
            N, _ = self._unit_gp_shape(i)
            wr = self.gp_wdet[u.gp0:u.gp1] * rho_gp[u.gp0:u.gp1]
            ms = np.einsum("ma,mb,m->ab", N, N, wr)
            n = u.nodes
            if u.eroded:
                diag = ms.sum(axis=1)
                for comp in range(3):
                    rows.append(3 * n + comp)
                    cols.append(3 * n + comp)
                    vals.append(diag)
            else:
                for comp in range(3):
                    d = 3 * n + comp
                    rows.append(np.repeat(d, len(n)))
                    cols.append(np.tile(d, len(n)))
                    vals.append(ms.ravel())
        if rows:
            M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(ndof, ndof))
        else:
            M = sp.csr_matrix((ndof, ndof))
        self._M = M
        return M

    def assemble(self, D: np.ndarray, dt: float, tangent: bool = True) -> Assembly:
        """Internal force and tangent of all intact units at displacement ``D``.

        Trial Gauss states and energies are stored on the mesh.
        """
        if self._plan is None:
            self._build_plan()
        ndof = 3 * self.n_nodes
        f_int = np.zeros(ndof)
        rows, cols, vals = [], [], []
        for blk in self._plan:
            gp, local, dNdX, dofs = blk["gp"], blk["local"], blk["dNdX"], blk["dofs"]
            nn = dNdX.shape[1]
            u = D[dofs].reshape(len(dofs), nn, 3)[local]
            f = np.empty((len(gp), nn, 3))
            k = np.empty((len(gp), 3 * nn, 3 * nn)) if tangent else None
            for ph in blk["phases"]:
                sel = np.flatnonzero(self.gp_phase[gp] == ph)
                g = gp[sel]
                fs, ks, res = gp_response(dNdX[sel], self.gp_wdet[g], u[sel], self.state_n.take(g), dt,
                                          self.materials[int(ph)], tangent=tangent)
                f[sel] = fs
                if tangent:
                    k[sel] = ks
                self.state_trial.put(g, res.state)
                self.gp_energy[g] = res.energy * self.gp_wdet[g]
            fu = np.add.reduceat(f, blk["seg"], axis=0).reshape(len(dofs), -1)
            f_int += np.bincount(dofs.ravel(), weights=fu.ravel(), minlength=ndof)
            if tangent:
                ku = np.add.reduceat(k, blk["seg"], axis=0)
                nd = dofs.shape[1]
                rows.append(np.repeat(dofs, nd, axis=1).ravel())
                cols.append(np.tile(dofs, (1, nd)).ravel())
                vals.append(ku.ravel())
        K = None
        if tangent:
            if rows:
                K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                  shape=(ndof, ndof))
            else:
                K = sp.csr_matrix((ndof, ndof))
        return Assembly(K, f_int, self.gp_energy)

    def acceleration(self, D: np.ndarray, dt: float) -> np.ndarray:
        return self.newmark.acceleration(D, self.D_n, self.v, self.a, dt)

    def dynamic_system(self, D: np.ndarray, dt: float, inertia: bool = True):
        """``(K_eff, R)`` with ``R = f_int + M a(D)`` for the Newton loop."""
        asm = self.assemble(D, dt)
        if not inertia:
            return asm.K, asm.f_int
        M = self.mass_matrix()
        R = asm.f_int + M @ self.acceleration(D, dt)
        return asm.K + self.newmark.mass_factor(dt) * M, R

    def out_of_balance(self, D: np.ndarray, dt: float, inertia: bool = True) -> np.ndarray:
        """``f_int + M a + C^T lam`` without touching the trial state cache."""
        asm = self.assemble(D, dt, tangent=False)
        R = asm.f_int
        if inertia:
            R = R + self.mass_matrix() @ self.acceleration(D, dt)
        C = self.constraints.matrix(len(D))
        return R + C.T @ self.constraints.lam

    def commit(self, D: np.ndarray, dt: float, inertia: bool = True):
        """Accept ``D`` as the converged state at the end of a time step."""
        if inertia:
            a_new = self.acceleration(D, dt)
            self.v = self.newmark.velocity(a_new, self.v, self.a, dt)
            self.a = a_new
        self.D = D.copy()
        self.D_n = D.copy()
        self.state_n = self.state_trial.copy()

    def subcell_energy(self) -> np.ndarray:
        """Stored plus dissipated energy per subcell from the last assembly."""
        return np.add.reduceat(self.gp_energy, self.sc_gp0) if self.n_gp else np.zeros(0)

    def total_mass(self) -> np.ndarray:
        """Total mass per direction (sum of all mass matrix entries)."""
        M = self.mass_matrix()
        return np.array([M[c::3, c::3].sum() for c in range(3)])

    # --- output ---------------------------------------------------------------------

    def snapshot_boxes(self):
        """Hex boxes for output: subcells of active cells and all elements."""
        out = []
        for i, u in enumerate(self.units):
            if not u.active:
                continue
            if u.kind == "cell":
                for s in u.subcells:
                    out.append((i, int(s), self.sc_lo[s], self.sc_hi[s]))
            else:
                out.append((i, int(u.subcells[0]), u.lo, u.hi))
        return out

    def write_vtk(self, path: str | Path, D: np.ndarray | None = None, title: str = "voxfrac"):
        """Legacy ASCII unstructured grid, one hexahedron per output box."""
        D = self.D if D is None else D
        boxes = self.snapshot_boxes()
        corners = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                            [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]])
        pts, disp, phase, eroded, alpha, svm = [], [], [], [], [], []
        vm = self.state_n.von_mises()
        for uid, s, lo, hi in boxes:
            vox = lo[None, :] + corners * (hi - lo)[None, :]
            N, _ = self.unit_shape_at(uid, vox)
            u = N @ D[self.unit_dofs(uid)].reshape(-1, 3)
            pts.append(vox * self.h)
            disp.append(u)
            g = slice(self.sc_gp0[s], self.sc_gp0[s] + self.gp_per_sc)
            phase.append(int(self.sc_phase[s]))
            eroded.append(int(self.units[uid].eroded))
            alpha.append(float(self.state_n.alpha[g].mean()))
            svm.append(float(vm[g].mean()))
        nb = len(boxes)
        pts = np.concatenate(pts) if nb else np.zeros((0, 3))
        disp = np.concatenate(disp) if nb else np.zeros((0, 3))
        with open(path, "w") as fh:
            fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
            fh.write(f"POINTS {len(pts)} double\n")
            np.savetxt(fh, pts, fmt="%.9g")
            fh.write(f"CELLS {nb} {9 * nb}\n")
            conn = np.hstack([np.full((nb, 1), 8), np.arange(8 * nb).reshape(nb, 8)])
            np.savetxt(fh, conn, fmt="%d")
            fh.write(f"CELL_TYPES {nb}\n")
            np.savetxt(fh, np.full(nb, 12), fmt="%d")
            fh.write(f"CELL_DATA {nb}\n")
            for name, arr, fmt in (("phase", phase, "%d"), ("eroded", eroded, "%d"),
                                   ("alpha", alpha, "%.9g"), ("tau_vM", svm, "%.9g")):
                kind = "int" if fmt == "%d" else "double"
                fh.write(f"SCALARS {name} {kind} 1\nLOOKUP_TABLE default\n")
                np.savetxt(fh, np.asarray(arr), fmt=fmt)
            fh.write(f"POINT_DATA {len(pts)}\nVECTORS displacement double\n")
            np.savetxt(fh, disp, fmt="%.9g")


def remove_constraints_for_eroded(constraints: ConstraintSet, element_dofs) -> ConstraintSet:
    """Drop rows whose master DOFs all belong to the eroded element."""
    eroded = np.zeros(max(int(np.max(element_dofs, initial=-1)), int(np.max(constraints.masters, initial=-1))) + 1,
                      dtype=bool)
    eroded[np.asarray(element_dofs, dtype=np.int64)] = True
    keep = np.ones(len(constraints), dtype=bool)
    for r in range(len(constraints)):
        m = constraints.masters[constraints.ptr[r]:constraints.ptr[r + 1]]
        keep[r] = not (len(m) and np.all(eroded[m]))
    return constraints.select(keep)
