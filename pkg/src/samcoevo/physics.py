"""Voxel mass-spring lattice: the fitness function.

One point mass sits at the centre of every present voxel.  Face-adjacent
voxels are joined by structural springs, and edge-adjacent voxels (in-plane
diagonals) by weaker shear springs.  Every spring touching an active voxel
has a rest length that breathes sinusoidally with the voxel's phase offset.
Voxels in the x=0 layer are clamped.  Integration is semi-implicit Euler.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from .errors import EmptyMorphology, NumericalDivergence, SamCoevoError
from .morphology import ACTIVE, VoxelGrid

FACE_OFFSETS = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
SHEAR_OFFSETS = ((1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1))


@dataclass(frozen=True)
class MaterialParams:
    voxel_edge: float = 1.0
    mass_per_voxel: float = 1.0
    stiffness_active: float = 10000.0
    stiffness_passive: float = 20000.0
    damping_ratio: float = 0.3
    actuation_amplitude: float = 0.15
    actuation_frequency: float = 4.0
    shear_factor: float = 0.5

    def validate(self) -> None:
        for name in ("voxel_edge", "mass_per_voxel", "stiffness_active",
                     "stiffness_passive", "actuation_frequency"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.damping_ratio <= 1:
            raise ValueError("damping_ratio must be in (0, 1]")
        if not 0 < self.actuation_amplitude < 0.5:
            raise ValueError("actuation_amplitude must be in (0, 0.5)")
        if not 0 <= self.shear_factor <= 1:
            raise ValueError("shear_factor must be in [0, 1]")

    def stiffness_of(self, material: int) -> float:
        return self.stiffness_active if material == ACTIVE else self.stiffness_passive


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    duration: float = 0.5
    sample_every: int = 10
    gravity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def validate(self, params: MaterialParams | None = None) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.sample_every < 1:
            raise ValueError("sample_every must be >= 1")
        if self.n_steps // self.sample_every < 1:
            raise ValueError("duration too short for two trace samples")
        if params is not None and self.duration * params.actuation_frequency < 2 - 1e-9:
            raise ValueError("duration must cover at least two actuation periods")


@dataclass(eq=False)
class LatticeState:
    voxels: np.ndarray          # (n, 3) integer voxel indices
    positions: np.ndarray       # (n, 3)
    velocities: np.ndarray      # (n, 3)
    initial_positions: np.ndarray
    bonds: np.ndarray           # (m, 2) node indices; face bonds first, then shear
    rest_length: np.ndarray     # (m,)
    stiffness: np.ndarray       # (m,)
    is_active_bond: np.ndarray  # (m,) bool
    is_face_bond: np.ndarray    # (m,) bool
    anchored: np.ndarray        # (n,) bool
    active_node: np.ndarray     # (n,) bool
    time: float = 0.0

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def face_bonds(self) -> np.ndarray:
        return self.bonds[self.is_face_bond]

    def copy(self) -> "LatticeState":
        return replace(self, positions=self.positions.copy(), velocities=self.velocities.copy())

    def translated(self, offset) -> "LatticeState":
        off = np.asarray(offset, dtype=float)
        return replace(self, positions=self.positions + off,
                       initial_positions=self.initial_positions + off,
                       velocities=self.velocities.copy())


@dataclass
class SimTrace:
    samples: np.ndarray                       # (k, 3) free-end centroid
    times: np.ndarray                         # (k,)
    dt_sample: float
    origin: np.ndarray = field(default=None)  # initial free-end centroid

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if self.origin is None:
            self.origin = self.samples[0].copy()
        self.origin = np.asarray(self.origin, dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "x", "y", "z"])
        for t, (x, y, z) in zip(self.times, self.samples):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y)), repr(float(z))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SimTrace":
        rows = list(csv.DictReader(io.StringIO(text)))
        times = np.array([float(r["t"]) for r in rows])
        samples = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])
        dt = float(times[1] - times[0]) if len(times) > 1 else 0.0
        return cls(samples, times, dt)


def build_lattice(grid: VoxelGrid, params: MaterialParams = MaterialParams()) -> LatticeState:
    present = grid.present
    if not present.any():
        raise EmptyMorphology("grid is empty")
    voxels = np.argwhere(present)
    index = -np.ones(grid.dims.shape, dtype=np.int64)
    index[tuple(voxels.T)] = np.arange(len(voxels))
    edge = params.voxel_edge
    bonds, rest, stiff, active, face = [], [], [], [], []

    node_k = np.where(grid.cells == ACTIVE, params.stiffness_active, params.stiffness_passive)
    shape = np.array(grid.dims.shape)

    def add(offsets, is_face):
        for off in offsets:
            off = np.array(off)
            b_vox = voxels + off
            ok = np.all((b_vox >= 0) & (b_vox < shape), axis=1)
            a_vox, b_vox = voxels[ok], b_vox[ok]
            b = index[tuple(b_vox.T)]
            a_vox, b_vox, b = a_vox[b >= 0], b_vox[b >= 0], b[b >= 0]
            a = index[tuple(a_vox.T)]
            ka, kb = node_k[tuple(a_vox.T)], node_k[tuple(b_vox.T)]
            k = 2 * ka * kb / (ka + kb)
            bonds.append(np.column_stack([a, b]))
            rest.append(np.full(len(a), edge * math.sqrt(float(off @ off))))
            stiff.append(k if is_face else k * params.shear_factor)
            active.append((grid.cells[tuple(a_vox.T)] == ACTIVE) | (grid.cells[tuple(b_vox.T)] == ACTIVE))
            face.append(np.full(len(a), is_face))

    add(FACE_OFFSETS, True)
    if params.shear_factor > 0:
        add(SHEAR_OFFSETS, False)
    positions = voxels.astype(float) * edge
    return LatticeState(
        voxels=voxels,
        positions=positions,
        velocities=np.zeros_like(positions),
        initial_positions=positions.copy(),
        bonds=np.concatenate(bonds).astype(np.int64).reshape(-1, 2),
        rest_length=np.concatenate(rest).astype(float),
        stiffness=np.concatenate(stiff).astype(float),
        is_active_bond=np.concatenate(active).astype(bool),
        is_face_bond=np.concatenate(face).astype(bool),
        anchored=voxels[:, 0] == 0,
        active_node=grid.cells[tuple(voxels.T)] == ACTIVE,
    )


def bond_phases(state: LatticeState, phases: dict) -> np.ndarray:
    """Mean phase of each bond's active endpoints (0 for passive bonds)."""
    node_phase = np.zeros(state.n_nodes)
    for i, vox in enumerate(state.voxels):
        if state.active_node[i]:
            node_phase[i] = phases.get(tuple(int(v) for v in vox), 0.0)
    a, b = state.bonds[:, 0], state.bonds[:, 1]
    act = state.active_node.astype(float)
    weight = act[a] + act[b]
    total = node_phase[a] * act[a] + node_phase[b] * act[b]
    return np.divide(total, weight, out=np.zeros_like(total), where=weight > 0)


class _Integrator:
    """Precomputed per-lattice quantities for the force loop."""

    def __init__(self, state: LatticeState, phases: dict, params: MaterialParams,
                 config: SimConfig):
        m = len(state.bonds)
        n = state.n_nodes
        self.a = state.bonds[:, 0]
        self.b = state.bonds[:, 1]
        rows = np.concatenate([self.a, self.b])
        cols = np.concatenate([np.arange(m), np.arange(m)])
        vals = np.concatenate([np.ones(m), -np.ones(m)])
        self.incidence = sparse.csr_matrix((vals, (rows, cols)), shape=(n, m))
        self.rest = state.rest_length
        self.k = state.stiffness
        self.c = 2.0 * params.damping_ratio * np.sqrt(state.stiffness * params.mass_per_voxel)
        self.active = np.flatnonzero(state.is_active_bond)
        self.phase = bond_phases(state, phases)[self.active]
        self.amp = params.actuation_amplitude
        self.omega = 2.0 * math.pi * params.actuation_frequency
        self.mass = params.mass_per_voxel
        self.gravity = np.asarray(config.gravity, dtype=float)
        self.has_gravity = bool(np.any(self.gravity))
        self.dt = config.dt
        self.anchored = state.anchored
        self.anchor_pos = state.initial_positions[state.anchored]

    def rest_lengths(self, t: float) -> np.ndarray:
        if len(self.active) == 0:
            return self.rest
        rest = self.rest.copy()
        rest[self.active] *= 1.0 + self.amp * np.sin(self.omega * t + self.phase)
        return rest

    def forces(self, x: np.ndarray, v: np.ndarray, t: float) -> np.ndarray:
        if len(self.a) == 0:
            f = np.zeros_like(x)
        else:
            d = x[self.b] - x[self.a]
            length = np.sqrt(np.einsum("ij,ij->i", d, d))
            u = d / length[:, None]
            dv = v[self.b] - v[self.a]
            rel = np.einsum("ij,ij->i", dv, u)
            mag = self.k * (length - self.rest_lengths(t)) + self.c * rel
            f = self.incidence @ (mag[:, None] * u)
        if self.has_gravity:
            f = f + self.mass * self.gravity
        return f

    def step(self, x: np.ndarray, v: np.ndarray, t: float) -> None:
        """Advance (x, v) in place by one semi-implicit Euler step."""
        v += (self.dt / self.mass) * self.forces(x, v, t)
        v[self.anchored] = 0.0
        x += self.dt * v
        x[self.anchored] = self.anchor_pos


def step(state: LatticeState, phases: dict, params: MaterialParams = MaterialParams(),
         config: SimConfig = SimConfig()) -> LatticeState:
    """One integration step; returns a new state."""
    new = state.copy()
    _Integrator(state, phases, params, config).step(new.positions, new.velocities, state.time)
    new.time = state.time + config.dt
    if not np.all(np.isfinite(new.positions)):
        raise NumericalDivergence(f"non-finite position at t={new.time}")
    return new


def free_end_nodes(state: LatticeState) -> np.ndarray:
    return np.flatnonzero(state.voxels[:, 0] == state.voxels[:, 0].max())


def run_lattice(state: LatticeState, phases: dict, params: MaterialParams = MaterialParams(),
                config: SimConfig = SimConfig(), monitor=None) -> SimTrace:
    """Integrate an already-built lattice and record the free-end trace.

    ``monitor(step_index, x, v, t)`` is called after every step if given.
    """
    config.validate()
    integ = _Integrator(state, phases, params, config)
    tip = free_end_nodes(state)
    x = state.positions.copy()
    v = state.velocities.copy()
    t0 = state.time
    n_steps = config.n_steps
    samples = [x[tip].mean(axis=0)]
    times = [t0]
    for i in range(1, n_steps + 1):
        integ.step(x, v, t0 + (i - 1) * config.dt)
        if monitor is not None:
            monitor(i, x, v, t0 + i * config.dt)
        if i % config.sample_every == 0:
            if not np.all(np.isfinite(x)):
                raise NumericalDivergence(f"non-finite position at step {i}")
            samples.append(x[tip].mean(axis=0))
            times.append(t0 + i * config.dt)
    return SimTrace(np.array(samples), np.array(times), config.dt * config.sample_every,
                    origin=samples[0])


def simulate(grid: VoxelGrid, phases: dict, params: MaterialParams = MaterialParams(),
             config: SimConfig = SimConfig()) -> SimTrace:
    active = set(grid.active_coords())
    if set(phases) - active:
        raise SamCoevoError("phase map has entries for non-active voxels")
    return run_lattice(build_lattice(grid, params), phases, params, config)


def upward_displacement(trace: SimTrace) -> float:
    return max(0.0, float(np.max(trace.samples[:, 2] - trace.origin[2])))


def yz_displacement(trace: SimTrace) -> float:
    d = trace.samples[:, 1:] - trace.origin[1:]
    return float(np.max(np.sqrt(np.einsum("ij,ij->i", d, d))))


# -- energy bookkeeping (diagnostics and tests) ---------------------------------

def potential_energy(state: LatticeState, x: np.ndarray, rest: np.ndarray | None = None) -> float:
    d = x[state.bonds[:, 1]] - x[state.bonds[:, 0]]
    length = np.sqrt(np.einsum("ij,ij->i", d, d))
    rest = state.rest_length if rest is None else rest
    return float(0.5 * np.sum(state.stiffness * (length - rest) ** 2))


def kinetic_energy(v: np.ndarray, mass: float) -> float:
    return float(0.5 * mass * np.einsum("ij,ij->", v, v))


class EnergyMeter:
    """Total mechanical energy of a running simulation.

    Semi-implicit Euler velocities live at half steps, so kinetic energy at
    step n uses the product of the straddling velocities, v(n-1/2).v(n+1/2).
    That estimator is exactly conserved by the scheme for linear springs;
    the naive 0.5*m*v^2 oscillates by O(omega*dt).
    """

    def __init__(self, state: LatticeState, phases: dict, params: MaterialParams,
                 config: SimConfig):
        self.state = state
        self.integ = _Integrator(state, phases, params, config)
        self.mass = params.mass_per_voxel

    def __call__(self, x: np.ndarray, v: np.ndarray, t: float) -> float:
        v_next = v + (self.integ.dt / self.mass) * self.integ.forces(x, v, t)
        v_next[self.integ.anchored] = 0.0
        kinetic = 0.5 * self.mass * float(np.einsum("ij,ij->", v, v_next))
        return potential_energy(self.state, x, self.integ.rest_lengths(t)) + kinetic
