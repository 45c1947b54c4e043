"""Eigenerosion on subcells and switched elements.

Erodible entities are subcells; a subcell lives either inside an active
finite cell or as the element that replaced it. Each entity keeps the list
of Gauss points within distance ``eps`` of any of its own Gauss points. The
crack neighbourhood ``C_eps`` is tracked as a Gauss point mask, and
``remaining`` lists exclude masked points.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# strict "closer than eps" with a relative guard so ties at exactly eps
# resolve the same way on mirrored geometry
DIST_GUARD = 1e-9


def within(d2, eps):
    return d2 < eps * eps * (1.0 - DIST_GUARD)


def hashed_pairs(X: np.ndarray, eps: float):
    """All ordered pairs (i, j) of points closer than ``eps`` (i == j included).

    Uses a uniform grid of bucket size ``eps``; only the 27 surrounding
    buckets of each point are searched.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    b = np.floor((X - X.min(axis=0)) / eps).astype(np.int64)
    shape = b.max(axis=0) + 3
    key = lambda c: (c[:, 0] + 1) + shape[0] * ((c[:, 1] + 1) + shape[1] * (c[:, 2] + 1))
    k = key(b)
    order = np.argsort(k, kind="stable")
    ks = k[order]
    I, J = [], []
    for off in itertools.product((-1, 0, 1), repeat=3):
        nk = key(b + np.array(off))
        lo = np.searchsorted(ks, nk, side="left")
        hi = np.searchsorted(ks, nk, side="right")
        cnt = hi - lo
        tot = int(cnt.sum())
        if tot == 0:
            continue
        src = np.repeat(np.arange(n), cnt)
        start = np.repeat(lo - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt)
        dst = order[start + np.arange(tot)]
        d2 = np.sum((X[src] - X[dst]) ** 2, axis=1)
        ok = within(d2, eps)
        I.append(src[ok])
        J.append(dst[ok])
    return np.concatenate(I), np.concatenate(J)


def build_neighborhood_lists(X: np.ndarray, owner: np.ndarray, eps: float, n_entities: int | None = None):
    """Per-entity Gauss point lists in CSR form ``(ptr, idx)``.

    ``owner[g]`` is the entity of Gauss point ``g``. Entity ``K``'s list
    holds every point closer than ``eps`` to any point owned by ``K``,
    sorted ascending.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    owner = np.asarray(owner, dtype=np.int64)
    n = len(owner)
    n_entities = int(owner.max()) + 1 if n_entities is None else n_entities
    i, j = hashed_pairs(X, eps)
    code = np.unique(owner[i] * n + j)
    ent = code // n
    idx = code % n
    ptr = np.zeros(n_entities + 1, dtype=np.int64)
    np.add.at(ptr, ent + 1, 1)
    return np.cumsum(ptr), idx


def brute_force_lists(X: np.ndarray, owner: np.ndarray, eps: float, n_entities: int | None = None):
    """O(n^2) reference for :func:`build_neighborhood_lists` (list of sets)."""
    X = np.asarray(X, dtype=float)
    owner = np.asarray(owner)
    n_entities = int(owner.max()) + 1 if n_entities is None else n_entities
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
    close = within(d2, eps)
    out = []
    for K in range(n_entities):
        out.append(set(np.flatnonzero(close[owner == K].any(axis=0)).tolist()))
    return out


@dataclass
class CrackState:
    """Crack set, crack neighbourhood mask and per-entity Gauss lists."""

    eps: float
    c: float
    h: float
    gp_volume: np.ndarray
    ptr: np.ndarray
    idx: np.ndarray
    in_c_eps: np.ndarray
    eroded: list = field(default_factory=list)

    @classmethod
    def build(cls, gp_X, gp_owner, gp_volume, h: float, c: float = 0.5, n_entities=None) -> "CrackState":
        eps = c * h
        ptr, idx = build_neighborhood_lists(gp_X, gp_owner, eps, n_entities)
        return cls(eps, c, h, np.asarray(gp_volume, dtype=float), ptr, idx,
                   np.zeros(len(gp_volume), dtype=bool))

    @property
    def n_entities(self) -> int:
        return len(self.ptr) - 1

    def full_list(self, K: int) -> np.ndarray:
        return self.idx[self.ptr[K]:self.ptr[K + 1]]

    def remaining(self, K: int) -> np.ndarray:
        """Neighbourhood points of ``K`` not yet absorbed into the crack."""
        lst = self.full_list(K)
        return lst[~self.in_c_eps[lst]]

    def __post_init__(self):
        self.eroded_mask = np.zeros(self.n_entities, dtype=bool)
        self.eroded_mask[self.eroded] = True

    def is_eroded(self, K: int) -> bool:
        return bool(self.eroded_mask[K])

    def erode(self, K: int) -> None:
        if self.eroded_mask[K]:
            raise ValueError(f"entity {K} already eroded")
        self.eroded.append(int(K))
        self.eroded_mask[K] = True
        self.in_c_eps[self.full_list(K)] = True


def incremental_crack_area(K, crack: CrackState):
    """Regularised crack area increment of entity ``K`` (scalar or array of ids)."""
    if np.ndim(K) == 0:
        return float(crack.gp_volume[crack.remaining(int(K))].sum() / (2 * crack.eps))
    return np.array([incremental_crack_area(int(k), crack) for k in K])


def all_crack_areas(crack: CrackState) -> np.ndarray:
    """Vectorised increment for every entity."""
    vals = np.where(crack.in_c_eps[crack.idx], 0.0, crack.gp_volume[crack.idx])
    sums = np.zeros(crack.n_entities)
    counts = np.diff(crack.ptr)
    nz = counts > 0
    if crack.idx.size:
        sums[nz] = np.add.reduceat(vals, crack.ptr[:-1][nz])
    return sums / (2 * crack.eps)


def net_energy_gain(energy, dA, G_c):
    """``-dF = energy - G_c dA``; energy is the integrated density of the entity."""
    return np.asarray(energy) - np.asarray(G_c) * np.asarray(dA)


def select_candidates(gain: np.ndarray, intact: np.ndarray, r_tie: float = 1e-3) -> np.ndarray:
    """Entities to erode: the maximiser plus everything within the tie band.

    Returns an empty array if no intact entity has a positive gain. Ordered
    by decreasing gain, then by id.
    """
    g = np.where(intact, gain, -np.inf)
    if not intact.any():
        return np.zeros(0, dtype=np.int64)
    gmax = g.max()
    if not gmax > 0:
        return np.zeros(0, dtype=np.int64)
    cand = np.flatnonzero(intact & (np.abs(gain - gmax) < r_tie * gmax))
    return cand[np.lexsort((cand, -gain[cand]))]


@dataclass
class ErosionEvent:
    step: int
    sweep: int
    entity: int
    kind: str        # "subcell" (cell switched for it) or "element"
    gain: float
    dA: float
    cumulative: int


def erosion_sweep(mesh, crack: CrackState, r_tie: float = 1e-3, step: int = 0, sweep: int = 0):
    """One erosion pass on the current converged trial state of ``mesh``.

    Erodes the maximiser and its ties, switching owning cells as needed.
    Returns the list of :class:`ErosionEvent` (empty when nothing erodes).
    """
    gain, dA = entity_gains(mesh, crack)
    intact = ~mesh.eroded_subcells
    cand = select_candidates(gain, intact, r_tie)
    events = []
    for s in cand:
        _, switched = mesh.erode_subcell(int(s))
        crack.erode(int(s))
        events.append(ErosionEvent(step, sweep, int(s), "subcell" if switched else "element",
                                   float(gain[s]), float(dA[s]), len(crack.eroded)))
    return events


def entity_gains(mesh, crack: CrackState):
    dA = all_crack_areas(crack)
    gc = np.array([mesh.materials[int(p)].G_c for p in mesh.sc_phase])
    return net_energy_gain(mesh.subcell_energy(), dA, gc), dA


def subcells_in_region(mesh, lo_mm, hi_mm) -> np.ndarray:
    """Subcells whose box intersects the open region ``(lo_mm, hi_mm)``."""
    a = mesh.sc_lo * mesh.h
    b = mesh.sc_hi * mesh.h
    lo_mm = np.asarray(lo_mm, dtype=float)
    hi_mm = np.asarray(hi_mm, dtype=float)
    hit = np.all((a < hi_mm) & (b > lo_mm), axis=1)
    return np.flatnonzero(hit)


def impose_initial_crack(mesh, crack: CrackState, subcells) -> list[ErosionEvent]:
    """Switch and erode the given subcells before the first step."""
    subcells = np.asarray(subcells, dtype=np.int64).ravel()
    if subcells.size == 0:
        raise ValueError("initial crack region selects no subcells")
    events = []
    for s in np.unique(subcells):
        _, switched = mesh.erode_subcell(int(s))
        crack.erode(int(s))
        events.append(ErosionEvent(0, 0, int(s), "subcell" if switched else "element", 0.0, 0.0,
                                   len(crack.eroded)))
    return events


EROSION_HEADER = ["step", "sweep", "eroded_id", "type", "gain", "dA", "cumulative"]


def write_erosion_log(events, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EROSION_HEADER)
        for e in events:
            w.writerow([e.step, e.sweep, e.entity, e.kind, repr(float(e.gain)), repr(float(e.dA)), e.cumulative])
