"""Two-population cooperative coevolution of SAM and controller CPPNs.

Scheduler tick ``g`` evaluates and advances the SAM population when ``g`` is
even and the controller population when ``g`` is odd; the other population
is left untouched.  Each candidate is scored as the arithmetic mean of its
pair fitnesses against a collaborator set picked from the other population's
most recently evaluated generation.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import math
import os
import pickle
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, cppn
from .cppn import CppnGenome, GenomeKind
from .dispatch import OK, PairEvaluator, PhysicsSpec, WorkerPool
from .errors import EmptyMorphology, MalformedRecord, NTooLarge
from .morphology import DESK_CANVAS, PAPER_CANVAS, CanvasDims, decode_morphology
from .neat import InnovationRegistry, NeatConfig, Population, initial_population, next_generation

log = logging.getLogger(__name__)

RUN_COLUMNS = ["generation", "best_fitness", "mean_fitness", "species_sam", "species_con",
               "evaluations"]
PAIR_COLUMNS = ["generation", "population", "candidate", "collaborator", "status", "fitness", "yz"]


class StrategyKind(str, enum.Enum):
    NF = "NF"    # n fittest vs all
    NW = "NW"    # n worst vs all
    NFW = "NFW"  # n fittest and n worst vs all
    NR = "NR"    # n random vs all


@dataclass(frozen=True)
class CollaborationStrategy:
    kind: StrategyKind
    n: int

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.n < 1:
            raise ValueError("n must be >= 1")

    def __str__(self):
        return f"{self.kind.value}{self.n}"

    @classmethod
    def parse(cls, text: str) -> "CollaborationStrategy":
        """``"NF2"`` -> NF with n=2."""
        head = text.rstrip("0123456789")
        return cls(StrategyKind(head.upper()), int(text[len(head):]))


@dataclass
class EvaluatedIndividual:
    genome: CppnGenome
    fitness: float
    collaborator_ids: list[int]
    last_evaluated_generation: int


@dataclass
class CoevolutionConfig:
    strategy: CollaborationStrategy = CollaborationStrategy(StrategyKind.NF, 2)
    generations: int = 200
    neat_sam: NeatConfig = field(default_factory=NeatConfig)
    neat_con: NeatConfig = field(default_factory=NeatConfig)
    seed: int = 0
    canvas: CanvasDims = PAPER_CANVAS
    physics: PhysicsSpec = PhysicsSpec()

    def validate(self) -> None:
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        self.neat_sam.validate()
        self.neat_con.validate()
        self.physics.params.validate()
        self.physics.sim.validate(self.physics.params)
        smallest = min(self.neat_sam.population_size, self.neat_con.population_size)
        if self.strategy.n > smallest:
            raise NTooLarge(f"n={self.strategy.n} exceeds population size")

    def digest(self) -> str:
        blob = json.dumps(_jsonable(asdict(self)), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def desk_config(strategy: CollaborationStrategy, seed: int = 0) -> CoevolutionConfig:
    """8x4x4 canvas, 8+8 individuals, 20 generations."""
    return CoevolutionConfig(strategy=strategy, generations=20,
                             neat_sam=NeatConfig(population_size=8),
                             neat_con=NeatConfig(population_size=8),
                             seed=seed, canvas=DESK_CANVAS)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, CanvasDims):
        return list(obj.shape)
    return obj


# -- collaborator selection and credit -------------------------------------------

def select_collaborators(pop: list[EvaluatedIndividual], strategy: CollaborationStrategy,
                         rng: np.random.Generator) -> list[int]:
    """Indices of the collaborators in ``pop``."""
    n = strategy.n
    if n > len(pop):
        raise NTooLarge(f"n={n} but only {len(pop)} individuals")
    best_first = sorted(range(len(pop)), key=lambda i: (-pop[i].fitness, i))
    worst_first = sorted(range(len(pop)), key=lambda i: (pop[i].fitness, i))
    kind = strategy.kind
    if kind is StrategyKind.NF:
        return best_first[:n]
    if kind is StrategyKind.NW:
        return worst_first[:n]
    if kind is StrategyKind.NFW:
        chosen = best_first[:n]
        return chosen + [i for i in worst_first[:n] if i not in chosen]
    return [int(i) for i in rng.choice(len(pop), size=n, replace=False)]


def credit(pair_fitnesses) -> float:
    """Arithmetic-mean credit assignment."""
    values = list(pair_fitnesses)
    return math.fsum(values) / len(values)


def assign_fitness(candidate: CppnGenome, collaborators: list[CppnGenome], evaluator) -> float:
    """Mean pair fitness of ``candidate`` against each collaborator.

    ``evaluator`` maps a list of (sam, controller) pairs to results carrying
    ``fitness``.
    """
    if not collaborators:
        raise ValueError("at least one collaborator required")
    if candidate.kind is GenomeKind.SAM:
        pairs = [(candidate, c) for c in collaborators]
    else:
        pairs = [(c, candidate) for c in collaborators]
    return credit(r.fitness for r in evaluator(pairs))


# -- run state -------------------------------------------------------------------

@dataclass
class PairLogEntry:
    generation: int
    population: str
    candidate: int
    collaborator: int
    status: str
    fitness: float
    yz: float


@dataclass
class GenerationRecord:
    generation: int
    best_fitness: float
    mean_fitness: float
    species_sam: int
    species_con: int
    evaluations: int


@dataclass
class Champion:
    sam: CppnGenome
    con: CppnGenome
    fitness: float
    generation: int


@dataclass
class CoevolutionState:
    config: CoevolutionConfig
    sam: Population
    con: Population
    sam_registry: InnovationRegistry
    con_registry: InnovationRegistry
    rng: np.random.Generator
    sam_evaluated: list[EvaluatedIndividual] = field(default_factory=list)
    con_evaluated: list[EvaluatedIndividual] = field(default_factory=list)
    generation: int = 0
    champion: Champion | None = None
    records: list[GenerationRecord] = field(default_factory=list)
    pair_log: list[PairLogEntry] = field(default_factory=list)
    bootstrap_evaluations: int = 0

    def species_counts(self) -> tuple[int, int]:
        return len(self.sam.species), len(self.con.species)


def _update_champion(state: CoevolutionState, sam, con, fitness: float, generation: int) -> None:
    if state.champion is None or fitness > state.champion.fitness:
        state.champion = Champion(sam, con, fitness, generation)


def init_state(config: CoevolutionConfig, evaluator) -> CoevolutionState:
    """Create both populations and bootstrap controller fitness.

    Before any fitness exists each controller is paired with one uniformly
    random SAM so that tick 0 can rank collaborators.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    sam = initial_population(config.neat_sam, GenomeKind.SAM, rng)
    con = initial_population(config.neat_con, GenomeKind.CONTROLLER, rng)
    state = CoevolutionState(config, sam, con,
                             InnovationRegistry.for_kind(GenomeKind.SAM),
                             InnovationRegistry.for_kind(GenomeKind.CONTROLLER), rng)
    partners = [int(rng.integers(len(sam))) for _ in con.genomes]
    results = evaluator([(sam.genomes[p], c) for p, c in zip(partners, con.genomes)])
    for i, (p, r) in enumerate(zip(partners, results)):
        state.con_evaluated.append(EvaluatedIndividual(con.genomes[i], r.fitness, [p], -1))
        state.pair_log.append(PairLogEntry(-1, "con", i, p, r.status, r.fitness, r.yz))
        _update_champion(state, sam.genomes[p], con.genomes[i], r.fitness, -1)
    state.bootstrap_evaluations = len(results)
    return state


def run_generation(state: CoevolutionState, evaluator) -> CoevolutionState:
    """Advance one scheduler tick in place and return the state."""
    g = state.generation
    cfg = state.config
    sam_turn = g % 2 == 0
    if sam_turn:
        pop, others, neat_cfg, registry, label = (state.sam, state.con_evaluated, cfg.neat_sam,
                                                  state.sam_registry, "sam")
    else:
        pop, others, neat_cfg, registry, label = (state.con, state.sam_evaluated, cfg.neat_con,
                                                  state.con_registry, "con")
    collab_ids = select_collaborators(others, cfg.strategy, state.rng)
    collabs = [others[j].genome for j in collab_ids]
    if sam_turn:
        pairs = [(cand, col) for cand in pop.genomes for col in collabs]
    else:
        pairs = [(col, cand) for cand in pop.genomes for col in collabs]
    results = evaluator(pairs)

    evaluated = []
    k = len(collabs)
    for i, cand in enumerate(pop.genomes):
        chunk = results[i * k:(i + 1) * k]
        for j, r in zip(collab_ids, chunk):
            if r.status != OK:
                log.debug("pair (%s %d, %d) at tick %d: %s", label, i, j, g, r.status)
            state.pair_log.append(PairLogEntry(g, label, i, j, r.status, r.fitness, r.yz))
            s, c = (cand, others[j].genome) if sam_turn else (others[j].genome, cand)
            _update_champion(state, s, c, r.fitness, g)
        evaluated.append(EvaluatedIndividual(cand, credit(r.fitness for r in chunk),
                                             list(collab_ids), g))
    fitnesses = [e.fitness for e in evaluated]
    advanced = next_generation(pop, fitnesses, registry, neat_cfg, state.rng)
    if sam_turn:
        state.sam, state.sam_evaluated = advanced, evaluated
    else:
        state.con, state.con_evaluated = advanced, evaluated
    state.records.append(GenerationRecord(
        g, state.champion.fitness, statistics.fmean(fitnesses),
        *state.species_counts(), len(results)))
    state.generation = g + 1
    return state


# -- whole runs ------------------------------------------------------------------

@dataclass
class RunRecord:
    config: CoevolutionConfig
    records: list[GenerationRecord]
    pair_log: list[PairLogEntry]
    champion: Champion
    manifest: dict

    def best_curve(self) -> list[float]:
        return [r.best_fitness for r in self.records]

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_run_csv(out / "run.csv", self.records)
        with open(out / "pairs.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PAIR_COLUMNS)
            for e in self.pair_log:
                w.writerow([e.generation, e.population, e.candidate, e.collaborator, e.status,
                            repr(e.fitness), repr(e.yz)])
        cppn.save(self.champion.sam, out / "champion_sam.genome")
        cppn.save(self.champion.con, out / "champion_con.genome")
        try:
            grid = decode_morphology(self.champion.sam, self.config.canvas)
            (out / "champion_grid.txt").write_text(grid.to_text())
        except EmptyMorphology:  # degenerate champion: nothing to render
            pass
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        return out


def write_run_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in records:
            w.writerow([r.generation, repr(r.best_fitness), repr(r.mean_fitness),
                        r.species_sam, r.species_con, r.evaluations])


def read_run_csv(path) -> list[GenerationRecord]:
    try:
        with open(path, newline="") as fh:
            return [GenerationRecord(int(r["generation"]), float(r["best_fitness"]),
                                     float(r["mean_fitness"]), int(r["species_sam"]),
                                     int(r["species_con"]), int(r["evaluations"]))
                    for r in csv.DictReader(fh)]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(f"{path}: {exc}") from exc


def manifest_for(config: CoevolutionConfig, extra: dict | None = None) -> dict:
    m = {
        "algorithm": "coevolution",
        "seed": config.seed,
        "config_hash": config.digest(),
        "code_version": __version__,
        "strategy": str(config.strategy),
        "generation_counting": "scheduler ticks; even=SAM, odd=controller",
        "bootstrap": "controllers paired with one uniformly random SAM before tick 0",
        "collaborator_fitness": "from the collaborator's most recent evaluated generation",
        "credit_assignment": "arithmetic mean",
        "canvas": list(config.canvas.shape),
        "physics_digest": config.physics.digest,
    }
    if extra:
        m.update(extra)
    return m


def save_checkpoint(state, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(state, fh)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return pickle.load(fh)


def run_experiment(config: CoevolutionConfig, evaluator=None, checkpoint=None,
                   stop_after: int | None = None) -> RunRecord | None:
    """Run (or resume) a full coevolutionary run.

    With ``checkpoint`` set, state is saved after every tick and an existing
    checkpoint is resumed.  ``stop_after`` halts once that many ticks are done
    and returns None (used to simulate interruptions).
    """
    own_pool = None
    if evaluator is None:
        own_pool = WorkerPool(config.physics)
        evaluator = PairEvaluator(config.canvas, own_pool)
    try:
        if checkpoint is not None and Path(checkpoint).exists():
            state = load_checkpoint(checkpoint)
            if state.config.digest() != config.digest():
                raise ValueError("checkpoint was written by a different configuration")
        else:
            state = init_state(config, evaluator)
            if checkpoint is not None:
                save_checkpoint(state, checkpoint)
        while state.generation < config.generations:
            if stop_after is not None and state.generation >= stop_after:
                return None
            run_generation(state, evaluator)
            if checkpoint is not None:
                save_checkpoint(state, checkpoint)
    finally:
        if own_pool is not None:
            own_pool.close()
    manifest = manifest_for(config, {"bootstrap_evaluations": state.bootstrap_evaluations})
    return RunRecord(config, state.records, state.pair_log, state.champion, manifest)
