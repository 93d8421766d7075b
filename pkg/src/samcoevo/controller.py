"""Per-voxel phase offsets from controller CPPNs, plus random controllers.

Controller text format: one ``x y z pho`` line per active voxel.
"""
from __future__ import annotations

import math

import numpy as np

from .cppn import CppnGenome, GenomeKind, build_phenotype
from .errors import KindMismatch, SamCoevoError
from .morphology import VoxelGrid, normalized_coordinates

PHASE_LIMIT = 2.0 * math.pi
ACTIVE_CODE, PASSIVE_CODE = 1.0, -1.0

PhaseOffsetMap = dict  # (x, y, z) -> phase in radians


def clamp_phase(raw):
    """Scale a raw CPPN output by 2*pi and saturate into [-2*pi, 2*pi]."""
    return np.clip(np.asarray(raw, dtype=float) * PHASE_LIMIT, -PHASE_LIMIT, PHASE_LIMIT)


def controller_inputs(grid: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    """Return (voxel index array (N, 3), CPPN input rows (N, 4)) for present voxels."""
    coords = normalized_coordinates(grid.dims).reshape(*grid.dims.shape, 3)
    idx = np.argwhere(grid.present)
    xyz = coords[idx[:, 0], idx[:, 1], idx[:, 2]]
    material = np.where(grid.active[idx[:, 0], idx[:, 1], idx[:, 2]], ACTIVE_CODE, PASSIVE_CODE)
    return idx, np.column_stack([xyz, material])


def decode_controller(genome: CppnGenome, grid: VoxelGrid) -> PhaseOffsetMap:
    if genome.kind is not GenomeKind.CONTROLLER:
        raise KindMismatch(f"expected a controller genome, got {genome.kind.value}")
    idx, inputs = controller_inputs(grid)
    if len(idx) == 0:
        return {}
    # passive voxels are queried too; only active ones carry a phase
    phases = clamp_phase(build_phenotype(genome).evaluate_batch(inputs)[:, 0])
    is_active = inputs[:, 3] == ACTIVE_CODE
    return {tuple(int(v) for v in idx[i]): float(phases[i]) for i in np.flatnonzero(is_active)}


def random_controller(grid: VoxelGrid, rng: np.random.Generator) -> PhaseOffsetMap:
    coords = grid.active_coords()
    draws = rng.uniform(-PHASE_LIMIT, PHASE_LIMIT, size=len(coords))
    return {c: float(p) for c, p in zip(coords, draws)}


def phases_to_text(phases: PhaseOffsetMap) -> str:
    return "".join(f"{x} {y} {z} {p!r}\n" for (x, y, z), p in sorted(phases.items()))


def phases_from_text(text: str) -> PhaseOffsetMap:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise SamCoevoError(f"bad controller line {line!r}")
        out[(int(parts[0]), int(parts[1]), int(parts[2]))] = float(parts[3])
    return out


def check_phases(phases: PhaseOffsetMap, grid: VoxelGrid) -> None:
    if set(phases) != set(grid.active_coords()):
        raise SamCoevoError("phase map domain differs from the active voxel set")
    if any(not (-PHASE_LIMIT <= p <= PHASE_LIMIT) for p in phases.values()):
        raise SamCoevoError("phase outside [-2pi, 2pi]")
