"""Age-Fitness Pareto Optimisation baseline over (SAM, controller) genome pairs.

Each generation: every age goes up by one, the population is doubled with
mutated copies of uniformly chosen parents plus one fresh random individual
of age 0, the newcomers are evaluated, and the population is cut back by
peeling Pareto fronts of (minimise age, maximise fitness).
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .coevolution import Champion, GenerationRecord, RunRecord
from .cppn import CppnGenome, GenomeKind
from .dispatch import PairEvaluator, PhysicsSpec, WorkerPool
from .morphology import PAPER_CANVAS, CanvasDims
from .neat import InnovationRegistry, NeatConfig, mutate, random_minimal_genome


@dataclass
class AfpoIndividual:
    sam_genome: CppnGenome
    con_genome: CppnGenome
    age: int = 0
    fitness: float = 0.0
    id: int = 0


@dataclass
class AfpoConfig:
    population_size: int = 50
    generations: int = 200
    seed: int = 0
    canvas: CanvasDims = PAPER_CANVAS
    physics: PhysicsSpec = PhysicsSpec()
    neat: NeatConfig = field(default_factory=NeatConfig)

    def validate(self) -> None:
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        self.physics.params.validate()
        self.physics.sim.validate(self.physics.params)


def dominates(a: AfpoIndividual, b: AfpoIndividual) -> bool:
    """``a`` is at least as young and as fit as ``b`` and strictly better in one."""
    return (a.fitness >= b.fitness and a.age <= b.age
            and (a.fitness > b.fitness or a.age < b.age))


def pareto_ranks(pop: list[AfpoIndividual]) -> list[list[int]]:
    """Indices grouped by front: first the non-dominated set, then the next, ..."""
    remaining = set(range(len(pop)))
    fronts = []
    while remaining:
        front = sorted(i for i in remaining
                       if not any(dominates(pop[j], pop[i]) for j in remaining if j != i))
        fronts.append(front)
        remaining -= set(front)
    return fronts


def select_survivors(pop: list[AfpoIndividual], size: int, rng: np.random.Generator) -> list[int]:
    """Indices of the ``size`` survivors, whole fronts first.

    The front that overflows is sampled at random, except that its fittest
    (then youngest) member is always kept so the best individual survives.
    """
    chosen: list[int] = []
    for front in pareto_ranks(pop):
        room = size - len(chosen)
        if room <= 0:
            break
        if len(front) <= room:
            chosen.extend(front)
            continue
        best = min(front, key=lambda i: (-pop[i].fitness, pop[i].age, i))
        rest = [i for i in front if i != best]
        picks = rng.permutation(len(rest))[: room - 1]
        chosen.append(best)
        chosen.extend(rest[k] for k in sorted(picks))
    return sorted(chosen)


@dataclass
class AfpoState:
    config: AfpoConfig
    population: list[AfpoIndividual]
    sam_registry: InnovationRegistry
    con_registry: InnovationRegistry
    rng: np.random.Generator
    generation: int = 0
    next_id: int = 0
    champion: Champion | None = None
    records: list[GenerationRecord] = field(default_factory=list)
    last_injected: list[int] = field(default_factory=list)


def _random_individual(state: AfpoState) -> AfpoIndividual:
    cfg = state.config
    ind = AfpoIndividual(random_minimal_genome(GenomeKind.SAM, cfg.neat, state.rng),
                         random_minimal_genome(GenomeKind.CONTROLLER, cfg.neat, state.rng),
                         age=0, id=state.next_id)
    state.next_id += 1
    return ind


def _evaluate(state: AfpoState, individuals: list[AfpoIndividual], evaluator) -> None:
    results = evaluator([(i.sam_genome, i.con_genome) for i in individuals])
    for ind, r in zip(individuals, results):
        ind.fitness = r.fitness
        if state.champion is None or r.fitness > state.champion.fitness:
            state.champion = Champion(ind.sam_genome, ind.con_genome, r.fitness, state.generation)


def init_afpo(config: AfpoConfig, evaluator) -> AfpoState:
    config.validate()
    rng = np.random.default_rng(config.seed)
    state = AfpoState(config, [], InnovationRegistry.for_kind(GenomeKind.SAM),
                      InnovationRegistry.for_kind(GenomeKind.CONTROLLER), rng)
    state.population = [_random_individual(state) for _ in range(config.population_size)]
    _evaluate(state, state.population, evaluator)
    return state


def afpo_generation(state: AfpoState, evaluator) -> AfpoState:
    """One AFPO generation, in place."""
    cfg = state.config
    rng = state.rng
    pop = [replace(i, age=i.age + 1) for i in state.population]
    state.sam_registry.new_generation()
    state.con_registry.new_generation()
    newcomers = []
    for _ in range(cfg.population_size - 1):
        parent = pop[rng.integers(len(pop))]
        newcomers.append(AfpoIndividual(
            mutate(parent.sam_genome, state.sam_registry, cfg.neat, rng),
            mutate(parent.con_genome, state.con_registry, cfg.neat, rng),
            age=parent.age, id=state.next_id))
        state.next_id += 1
    fresh = _random_individual(state)
    newcomers.append(fresh)
    _evaluate(state, newcomers, evaluator)
    combined = pop + newcomers
    keep = select_survivors(combined, cfg.population_size, rng)
    state.population = [combined[i] for i in keep]
    state.last_injected = [fresh.id]
    fits = [i.fitness for i in state.population]
    state.records.append(GenerationRecord(state.generation, state.champion.fitness,
                                          statistics.fmean(fits), 0, 0, len(newcomers)))
    state.generation += 1
    return state


def run_afpo(config: AfpoConfig, evaluator=None) -> RunRecord:
    own_pool = None
    if evaluator is None:
        own_pool = WorkerPool(config.physics)
        evaluator = PairEvaluator(config.canvas, own_pool)
    try:
        state = init_afpo(config, evaluator)
        while state.generation < config.generations:
            afpo_generation(state, evaluator)
    finally:
        if own_pool is not None:
            own_pool.close()
    manifest = {
        "algorithm": "afpo",
        "seed": config.seed,
        "code_version": __version__,
        "population_size": config.population_size,
        "variant": "mutation only; N-1 mutated offspring plus 1 random age-0 individual "
                   "per generation; offspring inherit parent age",
        "canvas": list(config.canvas.shape),
        "physics_digest": config.physics.digest,
        "initial_evaluations": config.population_size,
    }
    return RunRecord(config, state.records, [], state.champion, manifest)


def best_individual(pop: list[AfpoIndividual]) -> AfpoIndividual:
    return max(pop, key=lambda i: (i.fitness, -i.age, -i.id))


def non_dominated(pop: list[AfpoIndividual]) -> list[int]:
    return pareto_ranks(pop)[0] if pop else []

