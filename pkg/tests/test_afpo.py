import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from helpers import FakeEvaluator
from oracles import pareto_front_bruteforce

from samcoevo.afpo import (
    AfpoConfig,
    AfpoIndividual,
    afpo_generation,
    best_individual,
    dominates,
    init_afpo,
    non_dominated,
    pareto_ranks,
    run_afpo,
    select_survivors,
)
from samcoevo.cppn import GenomeKind, minimal_genome
from samcoevo.morphology import DESK_CANVAS

G_SAM = minimal_genome(GenomeKind.SAM)
G_CON = minimal_genome(GenomeKind.CONTROLLER)


def ind(age, fit, i=0):
    return AfpoIndividual(G_SAM, G_CON, age=age, fitness=fit, id=i)


def population(items):
    return [ind(a, f, i) for i, (a, f) in enumerate(items)]


items_strategy = st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6).map(lambda v: v / 6)),
                          min_size=2, max_size=24)


def test_dominates_examples():
    assert dominates(ind(1, 0.5), ind(2, 0.4))
    assert not dominates(ind(1, 0.4), ind(2, 0.5))
    assert not dominates(ind(2, 0.5), ind(1, 0.4))
    assert not dominates(ind(1, 0.5), ind(1, 0.5))


def test_clones_give_random_subset():
    pop = population([(3, 0.2)] * 10)
    assert pareto_ranks(pop) == [list(range(10))]
    a = select_survivors(pop, 5, np.random.default_rng(0))
    b = select_survivors(pop, 5, np.random.default_rng(1))
    assert len(a) == len(b) == 5 and a != b


def test_dominator_survives():
    pop = population([(0, 0.9), (1, 0.5), (2, 0.1)])
    for seed in range(20):
        assert 0 in select_survivors(pop, 1, np.random.default_rng(seed))


@given(items_strategy)
def test_front_matches_oracle(items):
    assert non_dominated(population(items)) == pareto_front_bruteforce(items)


@given(items_strategy, st.data())
def test_survivors_not_dominated_by_discarded(items, data):
    size = data.draw(st.integers(1, len(items)))
    seed = data.draw(st.integers(0, 1000))
    pop = population(items)
    keep = select_survivors(pop, size, np.random.default_rng(seed))
    assert len(keep) == size == len(set(keep))
    dropped = set(range(len(pop))) - set(keep)
    for s in keep:
        assert not any(dominates(pop[d], pop[s]) for d in dropped)
    best = max(f for _, f in items)
    assert any(pop[s].fitness == best for s in keep)


def small_afpo(seed=0, size=6, gens=5):
    return AfpoConfig(population_size=size, generations=gens, seed=seed, canvas=DESK_CANVAS)


def test_generation_mechanics():
    ev = FakeEvaluator()
    state = init_afpo(small_afpo(), ev)
    assert ev.calls == [6]
    for _ in range(8):
        before = {i.id: i.age for i in state.population}
        best_before = best_individual(state.population)
        afpo_generation(state, ev)
        assert len(state.population) == 6
        assert ev.calls[-1] == 6
        assert len(state.last_injected) == 1
        fresh_id = state.last_injected[0]
        # ids increase, so the fresh individual is the newest one created
        assert fresh_id == state.next_id - 1
        for i in state.population:
            if i.id in before:
                assert i.age == before[i.id] + 1
            if i.id == fresh_id:
                assert i.age == 0
        assert any(i.fitness >= best_before.fitness for i in state.population)


def test_run_afpo_record():
    a = run_afpo(small_afpo(seed=2), FakeEvaluator())
    b = run_afpo(small_afpo(seed=2), FakeEvaluator())
    assert a.records == b.records
    assert len(a.records) == 5
    curve = a.best_curve()
    assert all(y >= x for x, y in zip(curve, curve[1:]))
    assert all(r.species_sam == 0 and r.species_con == 0 for r in a.records)


def test_config_validation():
    with pytest.raises(ValueError):
        AfpoConfig(population_size=1).validate()
