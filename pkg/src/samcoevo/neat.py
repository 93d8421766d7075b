"""NEAT over CPPN genomes: innovation tracking, mutation, crossover, speciation.

Genomes are immutable; every operator returns a new genome.  Within a
population a genome's id is its list index, and ties on fitness are always
broken by the lower id.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .cppn import (
    Activation,
    ConnectionGene,
    CppnGenome,
    GenomeKind,
    NodeGene,
    NodeRole,
    check_genome,
    creates_cycle,
    initial_counters,
    minimal_genome,
)
from .errors import KindMismatch, NonFiniteFitness


@dataclass
class NeatConfig:
    population_size: int = 25
    compat_coeff_excess: float = 1.0
    compat_coeff_disjoint: float = 1.0
    compat_coeff_weight: float = 0.4
    compat_threshold: float = 3.0
    prob_add_node: float = 0.03
    prob_add_connection: float = 0.05
    prob_perturb_weight: float = 0.8
    prob_replace_weight: float = 0.1
    weight_perturb_sigma: float = 0.5
    weight_init_sigma: float = 1.0
    weight_limit: float = 8.0
    prob_crossover: float = 0.75
    elitism: int = 1
    survival_fraction: float = 0.2
    stagnation_limit: int = 15
    output_activation: Activation = Activation.LINEAR

    def __post_init__(self):
        self.output_activation = Activation(self.output_activation)

    def validate(self) -> None:
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        for f in fields(self):
            if f.name.startswith("prob_") and not 0 <= getattr(self, f.name) <= 1:
                raise ValueError(f"{f.name} must be a probability")
        if self.prob_perturb_weight + self.prob_replace_weight > 1:
            raise ValueError("prob_perturb_weight + prob_replace_weight must be <= 1")
        if not self.compat_threshold > 0:
            raise ValueError("compat_threshold must be positive")
        if not 0 < self.survival_fraction <= 1:
            raise ValueError("survival_fraction must be in (0, 1]")
        if self.elitism < 0 or self.stagnation_limit < 0:
            raise ValueError("elitism and stagnation_limit must be non-negative")


class InnovationRegistry:
    """Global innovation / node-id counters with per-generation dedup.

    The same structural mutation (same source, target and mutation kind)
    seen twice in one generation gets the same numbers.
    """

    def __init__(self, next_innovation: int, next_node_id: int):
        self.next_innovation = next_innovation
        self.next_node_id = next_node_id
        self.seen: dict[tuple, object] = {}

    @classmethod
    def for_kind(cls, kind: GenomeKind, input_arity=None, output_arity=None) -> "InnovationRegistry":
        return cls(*initial_counters(kind, input_arity, output_arity))

    def new_generation(self) -> None:
        self.seen.clear()

    def _fresh_innovation(self) -> int:
        self.next_innovation += 1
        return self.next_innovation - 1

    def connection(self, source: int, target: int) -> int:
        key = (source, target, "conn")
        if key not in self.seen:
            self.seen[key] = self._fresh_innovation()
        return self.seen[key]

    def split(self, source: int, target: int) -> tuple[int, int, int]:
        """(new node id, innovation source->node, innovation node->target)."""
        key = (source, target, "node")
        if key not in self.seen:
            node = self.next_node_id
            self.next_node_id += 1
            first, second = self._fresh_innovation(), self._fresh_innovation()
            self.seen[key] = (node, first, second)
            self.seen[(source, node, "conn")] = first
            self.seen[(node, target, "conn")] = second
        return self.seen[key]

    def counters(self) -> tuple[int, int]:
        return self.next_innovation, self.next_node_id


@dataclass
class Species:
    id: int
    representative: CppnGenome
    members: list[int] = field(default_factory=list)
    stagnation_counter: int = 0
    best_fitness: float = -math.inf


@dataclass
class Population:
    kind: GenomeKind
    genomes: list[CppnGenome]
    species: list[Species] = field(default_factory=list)
    generation: int = 0
    next_species_id: int = 0

    def __len__(self):
        return len(self.genomes)


# -- construction --------------------------------------------------------------

def _clip(w: float, limit: float) -> float:
    return float(min(limit, max(-limit, w)))


def random_minimal_genome(kind: GenomeKind, config: NeatConfig, rng: np.random.Generator) -> CppnGenome:
    template = minimal_genome(kind, output_activation=config.output_activation)
    weights = rng.normal(0.0, config.weight_init_sigma, size=len(template.connections))
    return minimal_genome(kind, [_clip(w, config.weight_limit) for w in weights],
                          output_activation=config.output_activation)


def initial_population(config: NeatConfig, kind: GenomeKind, rng: np.random.Generator) -> Population:
    config.validate()
    kind = GenomeKind(kind)
    genomes = [random_minimal_genome(kind, config, rng) for _ in range(config.population_size)]
    return Population(kind, genomes)


# -- distance ------------------------------------------------------------------

def compatibility_distance(a: CppnGenome, b: CppnGenome, config: NeatConfig) -> float:
    if a.kind != b.kind or (a.input_arity, a.output_arity) != (b.input_arity, b.output_arity):
        raise KindMismatch("genomes of different kinds")
    ga, gb = a.connection_map(), b.connection_map()
    if not ga and not gb:
        return 0.0
    cutoff = min(max(ga, default=-1), max(gb, default=-1))
    matching = ga.keys() & gb.keys()
    unmatched = ga.keys() ^ gb.keys()
    excess = sum(1 for i in unmatched if i > cutoff)
    disjoint = len(unmatched) - excess
    n = max(len(ga), len(gb))
    w = (sum(abs(ga[i].weight - gb[i].weight) for i in matching) / len(matching)) if matching else 0.0
    return (config.compat_coeff_excess * excess / n
            + config.compat_coeff_disjoint * disjoint / n
            + config.compat_coeff_weight * w)


# -- mutation ------------------------------------------------------------------

HIDDEN_ACTIVATIONS = tuple(Activation)


def mutate_weights(genome: CppnGenome, config: NeatConfig, rng: np.random.Generator) -> CppnGenome:
    conns = []
    for c in genome.connections:
        r = rng.random()
        if r < config.prob_perturb_weight:
            w = c.weight + rng.normal(0.0, config.weight_perturb_sigma)
        elif r < config.prob_perturb_weight + config.prob_replace_weight:
            w = rng.normal(0.0, config.weight_init_sigma)
        else:
            conns.append(c)
            continue
        conns.append(replace(c, weight=_clip(w, config.weight_limit)))
    return genome.replace(connections=conns)


def add_node(genome: CppnGenome, registry: InnovationRegistry, rng: np.random.Generator) -> CppnGenome:
    enabled = [c for c in genome.connections if c.enabled]
    if not enabled:
        return genome
    conn = enabled[rng.integers(len(enabled))]
    node_id, innov_in, innov_out = registry.split(conn.source, conn.target)
    nodes = genome.node_map()
    innovs = genome.connection_map()
    if node_id in nodes or innov_in in innovs or innov_out in innovs:
        return genome
    activation = HIDDEN_ACTIVATIONS[rng.integers(len(HIDDEN_ACTIVATIONS))]
    new_conns = [replace(c, enabled=False) if c.innovation == conn.innovation else c
                 for c in genome.connections]
    new_conns.append(ConnectionGene(innov_in, conn.source, node_id, 1.0))
    new_conns.append(ConnectionGene(innov_out, node_id, conn.target, conn.weight))
    return genome.replace(nodes=[*genome.nodes, NodeGene(node_id, NodeRole.HIDDEN, activation)],
                          connections=new_conns)


def legal_new_connections(genome: CppnGenome) -> list[tuple[int, int]]:
    """(source, target) pairs that can be added without a duplicate or a cycle.

    Cycles are checked against all connections, disabled ones included, so
    any later re-enabling stays feed-forward.
    """
    hidden = [n.id for n in genome.hidden_nodes()]
    sources = [*genome.source_ids, *hidden]
    targets = [*hidden, *genome.output_ids]
    existing = {(c.source, c.target) for c in genome.connections}
    edges = list(existing)
    return [(s, t) for s in sources for t in targets
            if s != t and (s, t) not in existing and not creates_cycle(edges, s, t)]


def add_connection(genome: CppnGenome, registry: InnovationRegistry, config: NeatConfig,
                   rng: np.random.Generator) -> CppnGenome:
    candidates = legal_new_connections(genome)
    if not candidates:
        return genome
    s, t = candidates[rng.integers(len(candidates))]
    innov = registry.connection(s, t)
    if innov in genome.connection_map():
        return genome
    w = _clip(rng.normal(0.0, config.weight_init_sigma), config.weight_limit)
    return genome.replace(connections=[*genome.connections, ConnectionGene(innov, s, t, w)])


def mutate(genome: CppnGenome, registry: InnovationRegistry, config: NeatConfig,
           rng: np.random.Generator) -> CppnGenome:
    child = mutate_weights(genome, config, rng)
    if rng.random() < config.prob_add_node:
        child = add_node(child, registry, rng)
    if rng.random() < config.prob_add_connection:
        child = add_connection(child, registry, config, rng)
    return child


# -- crossover -----------------------------------------------------------------

def crossover(fitter: CppnGenome, other: CppnGenome, rng: np.random.Generator) -> CppnGenome:
    """Matching genes come whole from a random parent; the rest from ``fitter``."""
    if fitter.kind != other.kind or (fitter.input_arity, fitter.output_arity) != (
            other.input_arity, other.output_arity):
        raise KindMismatch("cannot cross genomes of different kinds")
    other_genes = other.connection_map()
    conns = []
    for c in fitter.connections:
        match = other_genes.get(c.innovation)
        if match is not None and rng.random() < 0.5:
            conns.append(match)
        else:
            conns.append(c)
    return fitter.replace(connections=conns)


# -- speciation and reproduction -----------------------------------------------

def speciate(pop: Population, config: NeatConfig) -> list[Species]:
    """Assign every genome to the first species whose representative is close enough."""
    species = [replace(s, members=[]) for s in pop.species]
    next_id = pop.next_species_id
    for idx, genome in enumerate(pop.genomes):
        for s in species:
            if compatibility_distance(genome, s.representative, config) < config.compat_threshold:
                s.members.append(idx)
                break
        else:
            species.append(Species(next_id, genome, [idx]))
            next_id += 1
    pop.next_species_id = next_id
    return [s for s in species if s.members]


def allocate_offspring(scores, total: int) -> list[int]:
    """Split ``total`` proportionally to ``scores`` with largest-remainder rounding.

    Equal shares when every score is zero.  Remainder ties go to the lower index.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.sum() <= 0:
        scores = np.ones_like(scores)
    quotas = scores / scores.sum() * total
    counts = np.floor(quotas).astype(int)
    remainder = quotas - counts
    order = sorted(range(len(scores)), key=lambda i: (-remainder[i], i))
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _ranked(members: list[int], fitnesses) -> list[int]:
    return sorted(members, key=lambda i: (-fitnesses[i], i))


def plan_offspring(pop: Population, fitnesses, config: NeatConfig) -> tuple[list[Species], list[int]]:
    """Speciate, cull stagnant species and split the next population among the rest.

    Returns the surviving species and their offspring counts.  Updates
    ``pop.next_species_id``; species objects are fresh copies.
    """
    fitnesses = [float(f) for f in fitnesses]
    if len(fitnesses) != len(pop.genomes):
        raise ValueError("one fitness per genome required")
    if not all(math.isfinite(f) for f in fitnesses):
        raise NonFiniteFitness("all fitnesses must be finite")
    species = speciate(pop, config)
    champion = min(range(len(fitnesses)), key=lambda i: (-fitnesses[i], i))

    for s in species:
        best = max(fitnesses[i] for i in s.members)
        if best > s.best_fitness:
            s.best_fitness = best
            s.stagnation_counter = 0
        else:
            s.stagnation_counter += 1
    survivors = [s for s in species
                 if s.stagnation_counter <= config.stagnation_limit or champion in s.members]

    floor = min(fitnesses)
    shift = -floor if floor < 0 else 0.0
    scores = [sum(fitnesses[i] + shift for i in s.members) / len(s.members) for s in survivors]
    counts = allocate_offspring(scores, config.population_size)
    champ_sp = next(k for k, s in enumerate(survivors) if champion in s.members)
    if counts[champ_sp] == 0 and config.elitism > 0:
        donor = max(range(len(counts)), key=lambda k: (counts[k], -k))
        counts[donor] -= 1
        counts[champ_sp] += 1
    return survivors, counts


def next_generation(pop: Population, fitnesses, registry: InnovationRegistry, config: NeatConfig,
                    rng: np.random.Generator) -> Population:
    work = Population(pop.kind, pop.genomes, pop.species, pop.generation, pop.next_species_id)
    survivors, counts = plan_offspring(work, fitnesses, config)
    fitnesses = [float(f) for f in fitnesses]
    registry.new_generation()

    offspring: list[CppnGenome] = []
    next_species = []
    for s, count in zip(survivors, counts):
        if count == 0:
            continue
        ranked = _ranked(s.members, fitnesses)
        n_elite = min(config.elitism, count, len(ranked))
        offspring.extend(pop.genomes[i] for i in ranked[:n_elite])
        parents = ranked[: max(1, math.ceil(config.survival_fraction * len(ranked)))]
        for _ in range(count - n_elite):
            p1 = parents[rng.integers(len(parents))]
            if len(parents) > 1 and rng.random() < config.prob_crossover:
                p2 = parents[rng.integers(len(parents))]
                a, b = sorted((p1, p2), key=lambda i: (-fitnesses[i], i))
                child = crossover(pop.genomes[a], pop.genomes[b], rng)
            else:
                child = pop.genomes[p1]
            offspring.append(mutate(child, registry, config, rng))
        rep = pop.genomes[s.members[rng.integers(len(s.members))]]
        next_species.append(replace(s, representative=rep))

    return Population(pop.kind, offspring, next_species, pop.generation + 1, work.next_species_id)


# -- invariant checks ------------------------------------------------------------

def check_innovation_consistency(genomes) -> None:
    """Raise ValueError if one innovation number labels two different node pairs."""
    seen: dict[int, tuple[int, int]] = {}
    for g in genomes:
        for c in g.connections:
            pair = seen.setdefault(c.innovation, (c.source, c.target))
            if pair != (c.source, c.target):
                raise ValueError(f"innovation {c.innovation} maps to {pair} and "
                                 f"{(c.source, c.target)}")


def check_population(genomes, config: NeatConfig | None = None) -> None:
    for g in genomes:
        check_genome(g)
        if config is not None and any(abs(c.weight) > config.weight_limit for c in g.connections):
            raise ValueError("weight outside the allowed range")
    check_innovation_consistency(genomes)
