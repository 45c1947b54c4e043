"""Subcell decomposition of finite-cell voxel blocks.

Schemes (tag grammar)::

    T<k>                 octree, at most k levels; leftover heterogeneity is
                         assigned to the dominant phase and flagged
    T<k>min<m>           same, but every block is split at least m times
    M                    merge of single-voxel boxes
    OD                   optimal decomposition (run-length sweeps, best of 6
                         axis permutations)
    MT                   octree down to 2x2x2 blocks, then OD inside each
    T<k>[min<m>]-<tail>  octree first, then tail in each leaf; tail is one of
                         OD, MT, M, OD-M (M and OD-M merge across the whole
                         cell after the leaves are processed)

All boxes are half-open voxel index ranges ``[lo, hi)``.
"""

from __future__ import annotations

import csv
import itertools
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .voxel import CellGrid, VoxelGrid

PERMUTATIONS = list(itertools.permutations(range(3)))


@dataclass(frozen=True)
class Subcell:
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    phase: int
    flagged: bool = False  # phase assigned by threshold / level cap, not exact

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"empty subcell {self.lo}..{self.hi}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def volume(self) -> int:
        return int(np.prod(self.shape))

    def shifted(self, offset: Sequence[int]) -> "Subcell":
        lo = tuple(int(a + o) for a, o in zip(self.lo, offset))
        hi = tuple(int(a + o) for a, o in zip(self.hi, offset))
        return Subcell(lo, hi, self.phase, self.flagged)


def rasterize(subcells: Iterable[Subcell], shape: Sequence[int], fill: int = 255) -> np.ndarray:
    """Paint subcells back into a voxel block (inverse of decomposition)."""
    out = np.full(tuple(shape), fill, dtype=np.int32)
    for s in subcells:
        out[s.lo[0]:s.hi[0], s.lo[1]:s.hi[1], s.lo[2]:s.hi[2]] = s.phase
    return out


def cover_count(subcells: Iterable[Subcell], shape: Sequence[int]) -> np.ndarray:
    """How many subcells cover each voxel; an exact cover is all ones."""
    out = np.zeros(tuple(shape), dtype=np.int32)
    for s in subcells:
        out[s.lo[0]:s.hi[0], s.lo[1]:s.hi[1], s.lo[2]:s.hi[2]] += 1
    return out


def _dominant(block: np.ndarray) -> tuple[int, float]:
    ids, counts = np.unique(block, return_counts=True)
    k = int(np.argmax(counts))
    return int(ids[k]), 1.0 - counts[k] / block.size


def _split8(lo, hi):
    mid = [(a + b) // 2 for a, b in zip(lo, hi)]
    for bits in itertools.product((0, 1), repeat=3):
        clo = tuple(lo[d] if b == 0 else mid[d] for d, b in enumerate(bits))
        chi = tuple(mid[d] if b == 0 else hi[d] for d, b in enumerate(bits))
        yield clo, chi


def _octree_leaves(block, max_level, min_level, threshold, assign_at_cap):
    """Recursive octree; yields (lo, hi, phase-or-None, flagged).

    ``phase`` is None for a heterogeneous leaf handed on to a tail scheme.
    """
    if max_level < min_level:
        raise ValueError(f"max level {max_level} below min level {min_level}")
    if not 0.0 <= threshold < 0.5:
        raise ValueError("threshold must lie in [0, 0.5)")
    out = []

    def rec(lo, hi, level):
        sub = block[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        phase, minority = _dominant(sub)
        if level >= min_level:
            if minority == 0.0:
                out.append((lo, hi, phase, False))
                return
            if minority < threshold:
                out.append((lo, hi, phase, True))
                return
            if level == max_level:
                if assign_at_cap:
                    out.append((lo, hi, phase, True))
                else:
                    out.append((lo, hi, None, False))
                return
        ext = [b - a for a, b in zip(lo, hi)]
        if any(e % 2 for e in ext):
            raise ValueError(f"cannot octree-split block of extent {ext} at level {level}")
        for clo, chi in _split8(lo, hi):
            rec(clo, chi, level + 1)

    rec((0, 0, 0), tuple(block.shape), 0)
    return out


def octree_decompose(block: np.ndarray, max_level: int, threshold: float = 0.0,
                     min_level: int = 0) -> list[Subcell]:
    """Classical octree decomposition of one cell block."""
    block = np.asarray(block)
    return [Subcell(lo, hi, p, f)
            for lo, hi, p, f in _octree_leaves(block, max_level, min_level, threshold, True)]


def _runs_1d(line: np.ndarray):
    """Start/stop/phase of runs of equal values in a 1D array."""
    edges = np.flatnonzero(np.diff(line)) + 1
    starts = np.concatenate(([0], edges))
    stops = np.concatenate((edges, [len(line)]))
    return [(int(a), int(b), int(line[a])) for a, b in zip(starts, stops)]


def sweep_decompose(block: np.ndarray, perm: Sequence[int]) -> list[Subcell]:
    """One OD pass: runs along perm[0], merged along perm[1], then perm[2]."""
    block = np.asarray(block)
    perm = tuple(perm)
    t = block.transpose(perm)
    n0, n1, n2 = t.shape
    # runs along axis 0, then extend matching runs along axis 1
    rects = []  # (i0, i1, j0, j1, k, phase)
    for k in range(n2):
        open_ = {}
        for j in range(n1):
            row = {}
            for i0, i1, ph in _runs_1d(t[:, j, k]):
                key = (i0, i1, ph)
                j0 = open_[key] if key in open_ else j
                row[key] = j0
            for key, j0 in open_.items():
                if key not in row:
                    rects.append((key[0], key[1], j0, j, k, key[2]))
            open_ = row
        for key, j0 in open_.items():
            rects.append((key[0], key[1], j0, n1, k, key[2]))
    # extend identical rectangles along axis 2
    by_k: dict[int, list] = {}
    for r in rects:
        by_k.setdefault(r[4], []).append(r)
    boxes = []
    open_ = {}
    for k in range(n2):
        row = {}
        for i0, i1, j0, j1, _, ph in sorted(by_k.get(k, [])):
            key = (i0, i1, j0, j1, ph)
            row[key] = open_[key] if key in open_ else k
        for key, k0 in open_.items():
            if key not in row:
                boxes.append((key, k0, k))
        open_ = row
    for key, k0 in open_.items():
        boxes.append((key, k0, n2))
    out = []
    for (i0, i1, j0, j1, ph), k0, k1 in boxes:
        lo_t, hi_t = (i0, j0, k0), (i1, j1, k1)
        lo = [0, 0, 0]
        hi = [0, 0, 0]
        for d in range(3):
            lo[perm[d]] = lo_t[d]
            hi[perm[d]] = hi_t[d]
        out.append(Subcell(tuple(lo), tuple(hi), ph))
    out.sort(key=lambda s: (s.lo[2], s.lo[1], s.lo[0]))
    return out


def optimal_decompose(block: np.ndarray) -> list[Subcell]:
    """Fewest-subcell sweep over the 6 axis orders; ties go to the earlier order."""
    best = None
    for perm in PERMUTATIONS:
        cand = sweep_decompose(block, perm)
        if best is None or len(cand) < len(best):
            best = cand
        if len(best) == 1:
            break
    return best


def merge_subcells(subcells: Sequence[Subcell]) -> list[Subcell]:
    """Greedy merge of face-adjacent same-phase boxes with matching faces.

    Sweeps x, y, z in turn and repeats until nothing changes.
    """
    boxes = [(tuple(s.lo), tuple(s.hi), s.phase, s.flagged) for s in subcells]
    changed = True
    while changed:
        changed = False
        for ax in range(3):
            others = [d for d in range(3) if d != ax]
            index = {}
            for b in boxes:
                lo, hi, ph, _ = b
                key = (lo[ax],) + tuple(lo[d] for d in others) + tuple(hi[d] for d in others) + (ph,)
                index[key] = b
            used = set()
            merged = []
            for b in sorted(boxes, key=lambda b: (b[0][ax],) + b[0]):
                if b in used:
                    continue
                used.add(b)
                lo, hi, ph, fl = b
                while True:
                    key = (hi[ax],) + tuple(lo[d] for d in others) + tuple(hi[d] for d in others) + (ph,)
                    nb = index.get(key)
                    if nb is None or nb in used:
                        break
                    used.add(nb)
                    hi = tuple(nb[1][d] if d == ax else hi[d] for d in range(3))
                    fl = fl or nb[3]
                    changed = True
                merged.append((lo, hi, ph, fl))
            boxes = merged
    return [Subcell(lo, hi, ph, fl) for lo, hi, ph, fl in
            sorted(boxes, key=lambda b: (b[0][2], b[0][1], b[0][0]))]


def mt_decompose(block: np.ndarray) -> list[Subcell]:
    """Octree on heterogeneous blocks down to 2x2x2 voxels, then OD inside."""
    block = np.asarray(block)
    out = []

    def rec(lo, hi):
        sub = block[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        phase, minority = _dominant(sub)
        if minority == 0.0:
            out.append(Subcell(lo, hi, phase))
            return
        ext = [b - a for a, b in zip(lo, hi)]
        if max(ext) > 2 and not any(e % 2 for e in ext):
            for clo, chi in _split8(lo, hi):
                rec(clo, chi)
        else:
            out.extend(s.shifted(lo) for s in optimal_decompose(sub))

    rec((0, 0, 0), tuple(block.shape))
    return out


@dataclass(frozen=True)
class Scheme:
    tag: str
    levels: int | None = None     # octree max level, None when no octree stage
    min_level: int = 0
    tail: str | None = None       # OD, M, MT, OD-M; or whole-scheme OD/M/MT

    @property
    def uses_octree(self) -> bool:
        return self.levels is not None


_SCHEME_RE = re.compile(r"^T(\d+)(?:min(\d+))?(?:-(OD-M|OD|MT|M))?$")


def parse_scheme(tag: str) -> Scheme:
    tag = tag.strip()
    if tag in ("OD", "M", "MT"):
        return Scheme(tag, None, 0, tag)
    m = _SCHEME_RE.match(tag)
    if not m:
        raise ValueError(f"unparseable decomposition scheme {tag!r}")
    k = int(m.group(1))
    mn = int(m.group(2) or 0)
    if mn > k:
        raise ValueError(f"{tag}: minimum split exceeds octree depth")
    return Scheme(tag, k, mn, m.group(3))


def _single_voxels(block):
    out = []
    for idx in np.ndindex(*block.shape):
        out.append(Subcell(idx, tuple(i + 1 for i in idx), int(block[idx])))
    return out


def combined_decompose(block: np.ndarray, scheme: str | Scheme, threshold: float = 0.0) -> list[Subcell]:
    """Decompose one cell block with any scheme of the tag grammar."""
    block = np.asarray(block)
    sch = parse_scheme(scheme) if isinstance(scheme, str) else scheme
    if not sch.uses_octree:
        if sch.tail == "OD":
            return optimal_decompose(block)
        if sch.tail == "MT":
            return mt_decompose(block)
        return merge_subcells(_single_voxels(block))
    if sch.tail is None:
        return octree_decompose(block, sch.levels, threshold, sch.min_level)
    leaves = _octree_leaves(block, sch.levels, sch.min_level, threshold, assign_at_cap=False)
    out = []
    for lo, hi, phase, flagged in leaves:
        if phase is not None:
            out.append(Subcell(lo, hi, phase, flagged))
            continue
        sub = block[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        if sch.tail in ("OD", "OD-M"):
            parts = optimal_decompose(sub)
        elif sch.tail == "MT":
            parts = mt_decompose(sub)
        else:  # M: voxels of the leaf, merged below with everything else
            parts = _single_voxels(sub)
        out.extend(p.shifted(lo) for p in parts)
    if sch.tail in ("M", "OD-M"):
        out = merge_subcells(out)
    return out


@dataclass
class SubcellLayout:
    """Subcells of every cell of a grid, in cell-local voxel coordinates."""

    cell_grid: CellGrid
    cells: list[list[Subcell]]
    scheme: str
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def n_subcells(self) -> int:
        return sum(len(c) for c in self.cells)

    def global_boxes(self):
        """Arrays ``lo, hi, phase, cell`` over all subcells, global voxel indices."""
        lo, hi, ph, cell = [], [], [], []
        for ci, subs in enumerate(self.cells):
            o = self.cell_grid.cell_origin(ci)
            for s in subs:
                lo.append(np.add(s.lo, o))
                hi.append(np.add(s.hi, o))
                ph.append(s.phase)
                cell.append(ci)
        return (np.array(lo, dtype=np.int64).reshape(-1, 3), np.array(hi, dtype=np.int64).reshape(-1, 3),
                np.array(ph, dtype=np.int64), np.array(cell, dtype=np.int64))

    def rasterize(self) -> np.ndarray:
        lo, hi, ph, _ = self.global_boxes()
        out = np.full(self.cell_grid.dims, -1, dtype=np.int64)
        for a, b, p in zip(lo, hi, ph):
            out[a[0]:b[0], a[1]:b[1], a[2]:b[2]] = p
        return out

    def max_edge(self) -> float:
        """Longest subcell edge in physical units."""
        lo, hi, _, _ = self.global_boxes()
        return float(((hi - lo) * np.array(self.spacing)).max())


def decompose_grid(grid: VoxelGrid, cell_grid: CellGrid, scheme: str, threshold: float = 0.0) -> SubcellLayout:
    """Decompose every cell of ``grid``; results ordered by cell index."""
    cell_grid.check(grid)
    sch = parse_scheme(scheme)
    cells = [combined_decompose(cell_grid.cell_block(grid, c), sch, threshold)
             for c in range(cell_grid.n_cells)]
    return SubcellLayout(cell_grid, cells, sch.tag, grid.spacing)


def single_cell_layout(block: np.ndarray, subcells: list[Subcell], scheme: str = "custom") -> SubcellLayout:
    shape = tuple(np.asarray(block).shape)
    return SubcellLayout(CellGrid((1, 1, 1), shape), [list(subcells)], scheme)


# --- consistency --------------------------------------------------------------------

def _face_violations(lo: np.ndarray, hi: np.ndarray) -> list[tuple[int, int]]:
    bad = []
    for ax in range(3):
        u, v = [d for d in range(3) if d != ax]
        planes = np.intersect1d(hi[:, ax], lo[:, ax])
        for c in planes:
            a = np.flatnonzero(hi[:, ax] == c)
            b = np.flatnonzero(lo[:, ax] == c)
            alo, ahi = lo[a][:, [u, v]], hi[a][:, [u, v]]
            blo, bhi = lo[b][:, [u, v]], hi[b][:, [u, v]]
            olo = np.maximum(alo[:, None, :], blo[None, :, :])
            ohi = np.minimum(ahi[:, None, :], bhi[None, :, :])
            touching = np.all(ohi > olo, axis=2)
            a_in_b = np.all((alo[:, None, :] >= blo[None]) & (ahi[:, None, :] <= bhi[None]), axis=2)
            b_in_a = np.all((blo[None] >= alo[:, None, :]) & (bhi[None] <= ahi[:, None, :]), axis=2)
            ia, ib = np.nonzero(touching & ~a_in_b & ~b_in_a)
            bad.extend((int(a[i]), int(b[j])) for i, j in zip(ia, ib))
    return bad


def box_nodes(lo: np.ndarray, hi: np.ndarray, order: int = 1) -> np.ndarray:
    """Element node positions of a box in half-voxel lattice units."""
    lo2, hi2 = 2 * np.asarray(lo), 2 * np.asarray(hi)
    t = np.arange(order + 1)
    axes = [lo2[d] + (hi2[d] - lo2[d]) * t // order for d in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")], axis=1)


def hanging_node_map(lo: np.ndarray, hi: np.ndarray, order: int = 1, dims=None):
    """Hanging nodes of the mesh made of every box as an element of ``order``.

    Returns ``(nodes, masters)`` where ``nodes`` is an (n, 3) array of node
    positions in half-voxel units and ``masters`` maps a hanging node row to
    the list of boxes whose closure contains it without it being a node.
    """
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    if dims is None:
        dims = hi.max(axis=0)
    label = np.full(tuple(int(d) for d in dims), -1, dtype=np.int64)
    for i, (a, b) in enumerate(zip(lo, hi)):
        label[a[0]:b[0], a[1]:b[1], a[2]:b[2]] = i
    nodes = np.unique(np.concatenate([box_nodes(a, b, order) for a, b in zip(lo, hi)]), axis=0)
    # voxels whose closure holds a half-lattice point q: q even -> q/2-1, q/2; odd -> (q-1)/2
    cand = []
    for off in itertools.product((0, 1), repeat=3):
        v = np.where(nodes % 2 == 0, nodes // 2 - np.array(off), (nodes - 1) // 2)
        ok = np.all((v >= 0) & (v < np.array(dims)), axis=1)
        ids = np.full(len(nodes), -1, dtype=np.int64)
        ids[ok] = label[v[ok, 0], v[ok, 1], v[ok, 2]]
        cand.append(ids)
    cand = np.stack(cand, axis=1)
    masters: dict[int, list[int]] = {}
    for n, row in enumerate(cand):
        q = nodes[n]
        for b in np.unique(row[row >= 0]):
            span = 2 * (hi[b] - lo[b])
            rel = (q - 2 * lo[b]) * order
            if np.all(rel % span == 0):
                continue
            masters.setdefault(n, []).append(int(b))
    return nodes, masters


def _nonzero_master_nodes(q, lo, hi, order):
    """Nodes of box [lo,hi) with non-zero shape function value at point q."""
    lo2, hi2 = 2 * lo, 2 * hi
    per_axis = []
    for d in range(3):
        coords = lo2[d] + (hi2[d] - lo2[d]) * np.arange(order + 1) // order
        hit = coords == q[d]
        per_axis.append(coords[hit] if hit.any() else coords)
    return [tuple(p) for p in itertools.product(*per_axis)]


def _chained(nodes, masters, lo, hi, order):
    hanging = {tuple(nodes[n]) for n in masters}
    bad = []
    for n, boxes in masters.items():
        q = nodes[n]
        if not any(all(m not in hanging for m in _nonzero_master_nodes(q, lo[b], hi[b], order))
                   for b in boxes):
            bad.append(int(n))
    return bad


def check_consistency(layout: SubcellLayout, order: int = 1):
    """Face-matching and constraint-chain check for the fully switched mesh.

    Returns ``(consistent, violations)``: violating subcell index pairs from
    the face test, plus ``(-1, node)`` entries for chained hanging nodes.
    """
    lo, hi, _, _ = layout.global_boxes()
    bad = _face_violations(lo, hi)
    nodes, masters = hanging_node_map(lo, hi, order, layout.cell_grid.dims)
    bad.extend((-1, n) for n in _chained(nodes, masters, lo, hi, order))
    return not bad, bad


@dataclass
class DecompositionStats:
    scheme: str
    n_subcells: int
    n_constraints: int
    max_aspect: float
    global_edge_ratio: float
    consistent: bool

    def as_row(self) -> list:
        return [self.scheme, self.n_subcells, self.n_constraints,
                f"{self.max_aspect:.6g}", f"{self.global_edge_ratio:.6g}", int(self.consistent)]


def decomposition_stats(layout: SubcellLayout, order: int = 1) -> DecompositionStats:
    """Counts for the mesh where every subcell became an element.

    ``n_constraints`` counts constraint equations, three per hanging node.
    """
    lo, hi, _, _ = layout.global_boxes()
    edges = (hi - lo) * np.array(layout.spacing)
    aspect = edges.max(axis=1) / edges.min(axis=1)
    _, masters = hanging_node_map(lo, hi, order, layout.cell_grid.dims)
    ok, _ = check_consistency(layout, order)
    return DecompositionStats(layout.scheme, len(lo), 3 * len(masters), float(aspect.max()),
                              float(edges.max() / edges.min()), ok)


STATS_HEADER = ["scheme", "n_subcells", "n_constraints", "max_aspect", "global_edge_ratio", "consistent"]


def write_stats_csv(rows: Iterable[DecompositionStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_HEADER)
        for r in rows:
            w.writerow(r.as_row())
