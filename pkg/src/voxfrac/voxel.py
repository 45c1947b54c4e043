"""Voxel phase data: loading, writing, generation and the finite-cell grid.

A voxel file is a pair: a small TOML header and a raw ``uint8`` payload of
phase ids in x-fastest order (``index = x + nx * (y + ny * z)``)::

    dims = [32, 32, 32]
    spacing = [2.0, 2.0, 2.0]      # micrometres
    payload = "sample.raw"         # relative to the header
    phase_names = ["matrix", "inclusion"]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import tomli
import tomli_w

log = logging.getLogger(__name__)


class VoxelFormatError(ValueError):
    """Raised for malformed voxel headers or payloads."""


@dataclass(frozen=True)
class VoxelGrid:
    """Dense 3D phase-id array with physical voxel spacing.

    ``phases`` is indexed ``phases[x, y, z]``. ``spacing`` is in micrometres.
    """

    phases: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    phase_names: tuple[str, ...] = ()

    def __post_init__(self):
        phases = np.asarray(self.phases)
        if phases.ndim != 3:
            raise ValueError(f"phase array must be 3D, got shape {phases.shape}")
        if phases.dtype != np.uint8:
            if phases.size and (phases.min() < 0 or phases.max() > 255):
                raise ValueError("phase ids must fit in an unsigned byte")
            phases = phases.astype(np.uint8)
        phases.setflags(write=False)
        object.__setattr__(self, "phases", phases)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive lengths, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "phase_names", tuple(self.phase_names))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.phases.shape)

    @property
    def extent(self) -> np.ndarray:
        """Physical edge lengths of the whole grid in micrometres."""
        return np.array(self.dims) * np.array(self.spacing)

    def histogram(self) -> dict[int, int]:
        ids, counts = np.unique(self.phases, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def volume_fractions(self) -> dict[int, float]:
        total = self.phases.size
        return {k: v / total for k, v in self.histogram().items()}

    def validate(self, catalog: Iterable[int]) -> None:
        """Check every phase id present has an entry in ``catalog``."""
        known = set(int(k) for k in catalog)
        unknown = sorted(set(self.histogram()) - known)
        if unknown:
            raise VoxelFormatError(f"phase ids {unknown} missing from material catalog")

    def payload_bytes(self) -> bytes:
        # x-fastest == Fortran order for a [x, y, z] array
        return np.asfortranarray(self.phases).tobytes(order="F")


@dataclass(frozen=True)
class CellGrid:
    """Regular finite-cell grid whose cell faces coincide with voxel faces."""

    cells_per_axis: tuple[int, int, int]
    voxels_per_cell: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "cells_per_axis", tuple(int(c) for c in self.cells_per_axis))
        object.__setattr__(self, "voxels_per_cell", tuple(int(v) for v in self.voxels_per_cell))
        if any(c < 1 for c in self.cells_per_axis) or any(v < 1 for v in self.voxels_per_cell):
            raise ValueError("cell counts and voxels per cell must be positive")

    @classmethod
    def for_grid(cls, dims: Sequence[int], cells_per_axis: int | Sequence[int]) -> "CellGrid":
        """Tile ``dims`` voxels exactly with ``cells_per_axis`` cells per axis."""
        if np.isscalar(cells_per_axis):
            cells_per_axis = (int(cells_per_axis),) * 3
        vpc = []
        for n, c in zip(dims, cells_per_axis):
            if n % c:
                raise ValueError(f"{n} voxels cannot be tiled by {c} cells")
            vpc.append(n // c)
        return cls(tuple(cells_per_axis), tuple(vpc))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells_per_axis))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(c * v for c, v in zip(self.cells_per_axis, self.voxels_per_cell))

    def check(self, grid: VoxelGrid) -> None:
        if self.dims != grid.dims:
            raise ValueError(f"cell grid covers {self.dims} voxels, data has {grid.dims}")

    def cell_index(self, ijk: Sequence[int]) -> int:
        cx, cy, _ = self.cells_per_axis
        i, j, k = ijk
        return int(i + cx * (j + cy * k))

    def cell_ijk(self, index: int) -> tuple[int, int, int]:
        cx, cy, _ = self.cells_per_axis
        return (index % cx, (index // cx) % cy, index // (cx * cy))

    def cell_origin(self, index: int) -> np.ndarray:
        """Voxel index of the cell's lowest corner."""
        return np.array(self.cell_ijk(index)) * np.array(self.voxels_per_cell)

    def cell_block(self, grid: VoxelGrid, index: int) -> np.ndarray:
        o = self.cell_origin(index)
        v = self.voxels_per_cell
        return grid.phases[o[0]:o[0] + v[0], o[1]:o[1] + v[1], o[2]:o[2] + v[2]]


def load_voxels(header_path: str | Path, catalog: Iterable[int] | None = None) -> VoxelGrid:
    """Read a header + raw payload pair into a validated :class:`VoxelGrid`."""
    header_path = Path(header_path)
    with open(header_path, "rb") as fh:
        header = tomli.load(fh)
    try:
        dims = [int(d) for d in header["dims"]]
        payload = header["payload"]
    except KeyError as exc:
        raise VoxelFormatError(f"{header_path}: missing header field {exc}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise VoxelFormatError(f"{header_path}: bad dims {dims}")
    spacing = header.get("spacing", [1.0, 1.0, 1.0])
    payload_path = header_path.parent / payload
    if not payload_path.exists():
        raise VoxelFormatError(f"payload {payload_path} not found")
    raw = payload_path.read_bytes()
    n = dims[0] * dims[1] * dims[2]
    if len(raw) != n:
        raise VoxelFormatError(
            f"payload has {len(raw)} bytes, header declares {dims} = {n} voxels"
        )
    phases = np.frombuffer(raw, dtype=np.uint8).reshape(dims, order="F")
    grid = VoxelGrid(phases.copy(), tuple(spacing), tuple(header.get("phase_names", ())))
    if catalog is not None:
        grid.validate(catalog)
    log.info("loaded %s: dims=%s histogram=%s", header_path.name, grid.dims, grid.histogram())
    return grid


def write_voxels(grid: VoxelGrid, header_path: str | Path, payload_name: str | None = None) -> Path:
    """Write ``grid`` as header + payload; returns the payload path."""
    header_path = Path(header_path)
    payload_name = payload_name or header_path.with_suffix(".raw").name
    payload_path = header_path.parent / payload_name
    payload_path.write_bytes(grid.payload_bytes())
    header = {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "payload": payload_name,
        "phase_names": list(grid.phase_names),
    }
    with open(header_path, "wb") as fh:
        tomli_w.dump(header, fh)
    return payload_path


def generate_sphere_specimen(
    edge_voxels: int,
    edge_length: float,
    sphere_diameter: float,
    layer_thickness: float,
    phase_ids: Sequence[int] = (0, 1, 2),
    phase_names: Sequence[str] = ("matrix", "layer", "inclusion"),
) -> VoxelGrid:
    """Cube with a centred spherical inclusion wrapped in a concentric layer.

    ``phase_ids`` is ``(matrix, layer, inclusion)``. Phases are sampled at
    voxel centres; lengths in micrometres.
    """
    if edge_voxels < 4:
        raise ValueError("edge_voxels must be at least 4")
    if sphere_diameter < 0 or layer_thickness < 0:
        raise ValueError("diameter and layer thickness must be non-negative")
    if sphere_diameter + 2 * layer_thickness > edge_length:
        raise ValueError("sphere and layer do not fit inside the cube")
    matrix, layer, inclusion = phase_ids
    h = edge_length / edge_voxels
    c = (np.arange(edge_voxels) + 0.5) * h - 0.5 * edge_length
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    r = np.sqrt(x * x + y * y + z * z)
    radius = 0.5 * sphere_diameter
    phases = np.full(r.shape, matrix, dtype=np.uint8)
    phases[r < radius + layer_thickness] = layer
    phases[r < radius] = inclusion
    if sphere_diameter == 0:
        phases[:] = matrix
    names = dict(zip(phase_ids, phase_names))
    ordered = tuple(names.get(i, f"phase{i}") for i in range(max(phase_ids) + 1))
    return VoxelGrid(phases, (h, h, h), ordered)


def generate_blob_specimen(dims: Sequence[int] = (48, 48, 8), n_blobs: int = 12, radius: float = 5.0,
                           seed: int = 0, spacing: float = 1.0) -> VoxelGrid:
    """Two-phase grid with random spherical blobs (phase 1) in a matrix (phase 0).

    Blob centres are uniform in the box; radii vary by +-50 % around
    ``radius`` (voxel units). Deterministic for a given ``seed``.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in dims)
    idx = np.meshgrid(*[np.arange(d) + 0.5 for d in dims], indexing="ij")
    phases = np.zeros(dims, dtype=np.uint8)
    for _ in range(n_blobs):
        c = rng.uniform(0, dims)
        r = radius * rng.uniform(0.5, 1.5)
        d2 = sum((x - ci) ** 2 for x, ci in zip(idx, c))
        phases[d2 < r * r] = 1
    return VoxelGrid(phases, (spacing,) * 3, ("matrix", "particle"))
