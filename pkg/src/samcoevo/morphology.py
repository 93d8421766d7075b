"""Decode SAM-kind CPPNs into voxel grids.

Cells hold ``EMPTY``, ``ACTIVE`` or ``PASSIVE``.  The x axis is the long axis
and the x=0 face is the clamped root of the actuator.

Grid text format::

    nx ny nz
    <nz slabs of ny rows of nx characters from {., A, P}>

Slabs are written bottom (z=0) first, rows y=0 first, separated by blank
lines; the parser ignores blank lines.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .cppn import CppnGenome, GenomeKind, build_phenotype
from .errors import EmptyMorphology, KindMismatch, SamCoevoError

EMPTY, ACTIVE, PASSIVE = 0, 1, 2
_CHARS = {EMPTY: ".", ACTIVE: "A", PASSIVE: "P"}
_CODES = {v: k for k, v in _CHARS.items()}

FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class CanvasDims:
    nx: int = 20
    ny: int = 8
    nz: int = 8

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError(f"canvas dimensions must be positive, got {self.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @classmethod
    def parse(cls, text: str) -> "CanvasDims":
        """Accepts ``"8x4x4"`` or ``"8 4 4"``."""
        parts = text.replace("x", " ").replace(",", " ").split()
        return cls(*(int(p) for p in parts))

    def __str__(self):
        return f"{self.nx}x{self.ny}x{self.nz}"


PAPER_CANVAS = CanvasDims(20, 8, 8)
DESK_CANVAS = CanvasDims(8, 4, 4)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    dims: CanvasDims
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int8)
        if cells.shape != self.dims.shape:
            raise ValueError(f"cells shape {cells.shape} != dims {self.dims.shape}")
        cells = cells.copy()
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def from_array(cls, cells) -> "VoxelGrid":
        cells = np.asarray(cells, dtype=np.int8)
        return cls(CanvasDims(*cells.shape), cells)

    @property
    def present(self) -> np.ndarray:
        return self.cells != EMPTY

    @property
    def active(self) -> np.ndarray:
        return self.cells == ACTIVE

    @property
    def passive(self) -> np.ndarray:
        return self.cells == PASSIVE

    def count(self, material: int | None = None) -> int:
        if material is None:
            return int(self.present.sum())
        return int((self.cells == material).sum())

    def active_coords(self) -> list[tuple[int, int, int]]:
        return [tuple(int(v) for v in c) for c in np.argwhere(self.active)]

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.cells, other.cells)

    def __hash__(self):
        return hash((self.dims, self.cells.tobytes()))

    def to_text(self) -> str:
        nx, ny, nz = self.dims.shape
        out = [f"{nx} {ny} {nz}"]
        for z in range(nz):
            if z:
                out.append("")
            for y in range(ny):
                out.append("".join(_CHARS[int(self.cells[x, y, z])] for x in range(nx)))
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "VoxelGrid":
        rows = [r.strip() for r in text.splitlines() if r.strip()]
        try:
            nx, ny, nz = (int(v) for v in rows[0].split())
        except (ValueError, IndexError) as exc:
            raise SamCoevoError(f"bad grid header: {exc}") from exc
        body = rows[1:]
        if len(body) != ny * nz or any(len(r) != nx for r in body):
            raise SamCoevoError("grid body does not match header dimensions")
        cells = np.zeros((nx, ny, nz), dtype=np.int8)
        for z in range(nz):
            for y in range(ny):
                row = body[z * ny + y]
                for x, ch in enumerate(row):
                    if ch not in _CODES:
                        raise SamCoevoError(f"bad voxel character {ch!r}")
                    cells[x, y, z] = _CODES[ch]
        return cls(CanvasDims(nx, ny, nz), cells)


def normalized_coordinates(dims: CanvasDims) -> np.ndarray:
    """Lattice coordinates mapped to [-1, 1] per axis, shape (nx*ny*nz, 3), C order."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in dims.shape]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in grid], axis=1)


def boundary_mask(present: np.ndarray) -> np.ndarray:
    """Present voxels with at least one face neighbour that is empty or off-canvas."""
    padded = np.pad(present, 1, constant_values=False)
    interior = np.ones_like(present)
    core = (slice(1, -1),) * 3
    for axis in range(3):
        for shift in (1, -1):
            interior &= np.roll(padded, shift, axis=axis)[core]
    return present & ~interior


def apply_enclosure(grid: VoxelGrid) -> VoxelGrid:
    cells = grid.cells.copy()
    cells[boundary_mask(grid.present)] = PASSIVE
    return VoxelGrid(grid.dims, cells)


def anchored_mask(present: np.ndarray) -> np.ndarray:
    labels, _ = ndimage.label(present, structure=FACE_CONNECTIVITY)
    anchored = np.unique(labels[0][labels[0] > 0])
    return np.isin(labels, anchored)


def prune_to_anchored_component(grid: VoxelGrid) -> VoxelGrid:
    keep = anchored_mask(grid.present)
    if not keep.any():
        raise EmptyMorphology("no voxel connected to the x=0 face")
    cells = np.where(keep, grid.cells, EMPTY).astype(np.int8)
    return VoxelGrid(grid.dims, cells)


def raw_fields(genome: CppnGenome, dims: CanvasDims) -> tuple[np.ndarray, np.ndarray]:
    """Occupancy and material CPPN outputs over the canvas, each shaped like the grid."""
    if genome.kind is not GenomeKind.SAM:
        raise KindMismatch(f"expected a sam genome, got {genome.kind.value}")
    out = build_phenotype(genome).evaluate_batch(normalized_coordinates(dims))
    return out[:, 0].reshape(dims.shape), out[:, 1].reshape(dims.shape)


def decode_morphology(genome: CppnGenome, dims: CanvasDims = PAPER_CANVAS) -> VoxelGrid:
    occupancy, material = raw_fields(genome, dims)
    present = occupancy > 0
    cells = np.where(present, np.where(material > 0, ACTIVE, PASSIVE), EMPTY)
    grid = apply_enclosure(VoxelGrid(dims, cells))
    return prune_to_anchored_component(grid)


def check_grid(grid: VoxelGrid) -> None:
    """Raise SamCoevoError if the grid breaks the decoded-morphology invariants."""
    present = grid.present
    if not present.any():
        raise EmptyMorphology("grid is empty")
    labels, n = ndimage.label(present, structure=FACE_CONNECTIVITY)
    if n != 1:
        raise SamCoevoError(f"grid has {n} face-connected components")
    if not present[0].any():
        raise SamCoevoError("grid does not touch the x=0 face")
    if (grid.cells[boundary_mask(present)] != PASSIVE).any():
        raise SamCoevoError("enclosure shell contains non-passive voxels")
