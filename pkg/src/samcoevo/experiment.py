"""Experiment drivers: strategy sweeps, AFPO baseline runs and robustness tests.

Configuration files are plain text, one ``key = value`` per line, ``#``
starts a comment.  Recognised keys::

    preset          desk | paper (applied first, other keys override it)
    strategies      comma list of NF, NW, NFW, NR
    n               comma list of collaborator counts
    runs            number of seeds when ``seeds`` is not given
    seeds           comma list, ranges allowed (``0-4,7``)
    generations     scheduler ticks (coevolution) or generations (AFPO)
    canvas          e.g. 8x4x4
    population_sam, population_con, population_afpo
    samples         robustness controller samples
    workers         local evaluation processes
    remotes         comma list of host:port worker endpoints
    out             output directory
    neat.<field>    any NeatConfig field (both populations; population_size is
                    taken from the population_* keys)
    physics.<field> any MaterialParams field
    sim.<field>     dt, duration, sample_every
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from . import __version__
from .afpo import AfpoConfig, run_afpo
from .coevolution import (
    CoevolutionConfig,
    CollaborationStrategy,
    GenerationRecord,
    RunRecord,
    StrategyKind,
    run_experiment,
)
from .controller import random_controller
from .dispatch import PairEvaluator, PhysicsSpec, WorkerPool
from .errors import ConfigError, EmptyMorphology, NumericalDivergence, SamCoevoError
from .morphology import DESK_CANVAS, PAPER_CANVAS, CanvasDims, VoxelGrid
from .neat import NeatConfig
from .physics import MaterialParams, SimConfig, simulate, yz_displacement

log = logging.getLogger(__name__)

SWEEP_NS = (1, 2, 3, 5, 10)
MODES = ("coevolve", "afpo", "robustness", "stats", "plot")


@dataclass
class ExperimentConfig:
    mode: str = "coevolve"
    strategies: tuple[StrategyKind, ...] = tuple(StrategyKind)
    ns: tuple[int, ...] = SWEEP_NS
    runs: int = 10
    seeds: tuple[int, ...] | None = None
    generations: int = 200
    canvas: CanvasDims = PAPER_CANVAS
    population_sam: int = 25
    population_con: int = 25
    population_afpo: int = 50
    samples: int = 1000
    workers: int | None = None
    remotes: tuple[str, ...] = ()
    out: str = "results"
    params: MaterialParams = MaterialParams()
    sim: SimConfig = SimConfig()
    neat: NeatConfig = field(default_factory=NeatConfig)

    @classmethod
    def preset(cls, name: str) -> "ExperimentConfig":
        if name == "paper":
            return cls()
        if name == "desk":
            return cls(runs=5, generations=20, canvas=DESK_CANVAS,
                       population_sam=8, population_con=8, population_afpo=16)
        raise ConfigError(f"unknown preset {name!r}")

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.generations < 1:
            raise ConfigError("generations must be >= 1")
        if not self.strategies or not self.ns:
            raise ConfigError("at least one strategy and one n are required")
        bad = [n for n in self.ns if n not in SWEEP_NS]
        if bad:
            raise ConfigError(f"n values {bad} not in {SWEEP_NS}")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        try:
            self.params.validate()
            self.sim.validate(self.params)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def seed_list(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else list(range(self.runs))

    @property
    def physics(self) -> PhysicsSpec:
        return PhysicsSpec(self.params, self.sim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategies"] = [s.value for s in self.strategies]
        d["canvas"] = str(self.canvas)
        d["seeds"] = self.seed_list
        return d

    def digest(self) -> str:
        """Hash of everything that affects results (output location excluded)."""
        d = self.to_dict()
        for key in ("out", "workers", "remotes", "mode"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def coevolution_config(self, strategy: CollaborationStrategy, seed: int) -> CoevolutionConfig:
        return CoevolutionConfig(strategy=strategy, generations=self.generations,
                                 neat_sam=replace(self.neat, population_size=self.population_sam),
                                 neat_con=replace(self.neat, population_size=self.population_con),
                                 seed=seed, canvas=self.canvas, physics=self.physics)

    def afpo_config(self, seed: int) -> AfpoConfig:
        return AfpoConfig(population_size=self.population_afpo, generations=self.generations,
                          seed=seed, canvas=self.canvas, physics=self.physics,
                          neat=replace(self.neat, population_size=self.population_afpo))

    def make_pool(self) -> WorkerPool:
        return WorkerPool(self.physics, workers=self.workers, remotes=self.remotes)


# -- config file ----------------------------------------------------------------

def parse_int_list(text: str) -> tuple[int, ...]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        if sep and lo:
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _split_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _coerce(cls, obj, key: str, value: str):
    names = {f.name: f for f in fields(cls)}
    if key not in names:
        raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
    if key == "gravity":
        parts = _split_list(value)
        if len(parts) != 3:
            raise ConfigError("gravity needs three components")
        return replace(obj, gravity=tuple(float(p) for p in parts))
    current = getattr(obj, key)
    return replace(obj, **{key: type(current)(value)})


def parse_config_text(text: str, base: ExperimentConfig | None = None,
                      honor_preset: bool = True) -> ExperimentConfig:
    items = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        items.append((lineno, key.strip().lower(), value.strip()))
    cfg = base or ExperimentConfig()
    for _, key, value in items:
        if key == "preset" and honor_preset:
            cfg = ExperimentConfig.preset(value)
    for lineno, key, value in items:
        try:
            cfg = _apply(cfg, key, value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from exc
    return cfg


def _apply(cfg: ExperimentConfig, key: str, value: str) -> ExperimentConfig:
    if key == "preset":
        return cfg
    if key == "strategies":
        return replace(cfg, strategies=tuple(StrategyKind(s.upper()) for s in _split_list(value)))
    if key == "n":
        return replace(cfg, ns=parse_int_list(value))
    if key == "seeds":
        return replace(cfg, seeds=parse_int_list(value))
    if key == "canvas":
        return replace(cfg, canvas=CanvasDims.parse(value))
    if key == "remotes":
        return replace(cfg, remotes=_split_list(value))
    if key == "workers":
        return replace(cfg, workers=int(value))
    if key in ("mode", "out"):
        return replace(cfg, **{key: value})
    if key in ("runs", "generations", "population_sam", "population_con", "population_afpo",
               "samples"):
        return replace(cfg, **{key: int(value)})
    if key.startswith("physics."):
        return replace(cfg, params=_coerce(MaterialParams, cfg.params, key[8:], value))
    if key.startswith("neat."):
        return replace(cfg, neat=_coerce(NeatConfig, cfg.neat, key[5:], value))
    if key.startswith("sim."):
        return replace(cfg, sim=_coerce(SimConfig, cfg.sim, key[4:], value))
    raise ConfigError(f"unknown key {key!r}")


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(), base)


def write_manifest(path, cfg: ExperimentConfig, extra: dict | None = None) -> dict:
    m = {"code_version": __version__, "config_hash": cfg.digest(), "config": cfg.to_dict()}
    if extra:
        m.update(extra)
    Path(path).write_text(json.dumps(m, indent=2, sort_keys=True))
    return m


# -- sweeps ---------------------------------------------------------------------

@dataclass
class SweepResult:
    runs: dict[tuple[str, int], RunRecord] = field(default_factory=dict)
    failures: dict[tuple[str, int], str] = field(default_factory=dict)
    aggregate: dict[str, list[float]] = field(default_factory=dict)
    out_dir: Path | None = None

    def labels(self) -> list[str]:
        return sorted({label for label, _ in self.runs})


def mean_best_curve(runs: list[list[GenerationRecord]]) -> list[float]:
    """Per-generation mean of best_fitness across runs (equal lengths required)."""
    lengths = {len(r) for r in runs}
    if len(lengths) != 1:
        raise ValueError("runs have different lengths")
    return [statistics.fmean(r[g].best_fitness for r in runs) for g in range(lengths.pop())]


def write_aggregate(path, aggregate: dict[str, list[float]], counts: dict[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "generation", "mean_best_fitness", "runs"])
        for label in sorted(aggregate):
            for g, v in enumerate(aggregate[label]):
                w.writerow([label, g, repr(v), counts[label]])


def write_finals(path, result: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "seed", "final_best"])
        for (label, seed), rec in sorted(result.runs.items()):
            w.writerow([label, seed, repr(rec.records[-1].best_fitness)])


def _finish(result: SweepResult, out: Path | None) -> SweepResult:
    grouped: dict[str, list[list[GenerationRecord]]] = {}
    for (label, _), rec in sorted(result.runs.items()):
        grouped.setdefault(label, []).append(rec.records)
    result.aggregate = {label: mean_best_curve(runs) for label, runs in grouped.items()}
    if out is not None:
        write_aggregate(out / "aggregate.csv", result.aggregate,
                        {k: len(v) for k, v in grouped.items()})
        write_finals(out / "finals.csv", result)
        if result.failures:
            (out / "failures.json").write_text(json.dumps(
                {f"{k[0]}/seed{k[1]}": v for k, v in sorted(result.failures.items())}, indent=2))
    return result


def sweep_cells(cfg: ExperimentConfig) -> list[CollaborationStrategy]:
    return [CollaborationStrategy(kind, n) for kind in cfg.strategies for n in cfg.ns]


def run_sweep(cfg: ExperimentConfig, out_dir=None, pool: WorkerPool | None = None,
              cells: list[CollaborationStrategy] | None = None) -> SweepResult:
    """Every (strategy, n, seed) cell of a coevolution sweep.

    ``cells`` overrides the strategies x n product of the config.

    Each cell checkpoints after every tick, so re-running an interrupted sweep
    with the same config resumes where it stopped.  A failing cell is recorded
    and the sweep continues.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "sweep_manifest.json", cfg, {"algorithm": "coevolution"})
    own = pool is None
    pool = pool or cfg.make_pool()
    result = SweepResult(out_dir=out)
    try:
        for strategy in (cells if cells is not None else sweep_cells(cfg)):
            label = str(strategy)
            for seed in cfg.seed_list:
                cell = out / label / f"seed{seed}" if out is not None else None
                try:
                    ccfg = cfg.coevolution_config(strategy, seed)
                    ccfg.validate()
                    if cell is not None:
                        cell.mkdir(parents=True, exist_ok=True)
                    rec = run_experiment(ccfg, PairEvaluator(cfg.canvas, pool),
                                         checkpoint=cell / "checkpoint.pkl" if cell else None)
                except (SamCoevoError, ValueError) as exc:
                    log.warning("cell %s seed %d failed: %s", label, seed, exc)
                    result.failures[(label, seed)] = f"{type(exc).__name__}: {exc}"
                    continue
                if cell is not None:
                    rec.write(cell)
                result.runs[(label, seed)] = rec
    finally:
        if own:
            pool.close()
    return _finish(result, out)


def run_afpo_sweep(cfg: ExperimentConfig, out_dir=None, pool: WorkerPool | None = None) -> SweepResult:
    """AFPO baseline over every seed; cells are labelled ``AFPO``."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "sweep_manifest.json", cfg, {"algorithm": "afpo"})
    own = pool is None
    pool = pool or cfg.make_pool()
    result = SweepResult(out_dir=out)
    try:
        for seed in cfg.seed_list:
            try:
                rec = run_afpo(cfg.afpo_config(seed), PairEvaluator(cfg.canvas, pool))
            except (SamCoevoError, ValueError) as exc:
                result.failures[("AFPO", seed)] = f"{type(exc).__name__}: {exc}"
                continue
            if out is not None:
                rec.write(out / "AFPO" / f"seed{seed}")
            result.runs[("AFPO", seed)] = rec
    finally:
        if own:
            pool.close()
    return _finish(result, out)


# -- robustness -----------------------------------------------------------------

@dataclass(frozen=True)
class RobustnessReport:
    morphology_id: str
    values: tuple[float, ...]
    seed: int
    diverged: int = 0

    @property
    def minimum(self) -> float:
        return min(self.values)

    @property
    def maximum(self) -> float:
        return max(self.values)

    @property
    def median(self) -> float:
        return statistics.median(self.values)

    @property
    def mean(self) -> float:
        return math.fsum(self.values) / len(self.values)

    def summary(self) -> dict[str, float]:
        return {"min": self.minimum, "max": self.maximum, "median": self.median,
                "mean": self.mean, "samples": len(self.values), "diverged": self.diverged}

    def density(self, points: int = 128) -> tuple[np.ndarray, np.ndarray] | None:
        """Gaussian KDE with Silverman bandwidth on a grid over [min, max].

        None when all values coincide (the estimate is degenerate).
        """
        v = np.asarray(self.values)
        if len(v) < 2 or np.ptp(v) == 0:
            return None
        kde = gaussian_kde(v, bw_method="silverman")
        xs = np.linspace(v.min(), v.max(), points)
        return xs, kde(xs)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "robustness.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "yz_displacement"])
            for i, v in enumerate(self.values):
                w.writerow([i, repr(v)])
        with open(out / "robustness_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["statistic", "value"])
            for k, v in self.summary().items():
                w.writerow([k, repr(v)])
        dens = self.density()
        with open(out / "robustness_density.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["yz_displacement", "density"])
            if dens is not None:
                for x, d in zip(*dens):
                    w.writerow([repr(float(x)), repr(float(d))])
        return out

    @classmethod
    def read(cls, path, morphology_id: str = "", seed: int = 0) -> "RobustnessReport":
        with open(path, newline="") as fh:
            values = tuple(float(r["yz_displacement"]) for r in csv.DictReader(fh))
        return cls(morphology_id, values, seed)


def morphology_id(grid: VoxelGrid) -> str:
    return hashlib.sha256(grid.to_text().encode()).hexdigest()[:16]


def _robust_one(args) -> tuple[float, bool]:
    grid, phases, physics = args
    try:
        trace = simulate(grid, phases, physics.params, physics.sim)
    except NumericalDivergence:
        return 0.0, True
    return yz_displacement(trace), False


def run_robustness(grid: VoxelGrid, samples: int = 1000, seed: int = 0,
                   physics: PhysicsSpec = PhysicsSpec(), workers: int = 1) -> RobustnessReport:
    """yz displacement of ``grid`` under ``samples`` random phase maps.

    Phase maps are drawn sequentially from one seeded generator, so the
    report does not depend on ``workers``.  Diverged simulations count as 0.
    """
    if grid.count() == 0:
        raise EmptyMorphology("robustness needs a non-empty morphology")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    jobs = [(grid, random_controller(grid, rng), physics) for _ in range(samples)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            out = list(ex.map(_robust_one, jobs, chunksize=max(1, samples // (4 * workers))))
    else:
        out = [_robust_one(j) for j in jobs]
    return RobustnessReport(morphology_id(grid), tuple(v for v, _ in out), seed,
                            sum(d for _, d in out))
