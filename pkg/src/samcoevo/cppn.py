"""CPPN genotypes, feed-forward phenotypes and the genome text format.

Node ids follow a fixed layout: inputs are ``0..I-1``, the bias node is
``I`` and outputs are ``I+1..I+O``.  Hidden nodes get ids handed out by the
innovation registry, so they are always larger than the output ids.

Genome text format (one genome per file; ``;`` may replace newlines to put
one genome on a single line)::

    genome kind=sam inputs=3 outputs=2 activations=act-v1
    node <id> <input|bias|hidden|output> <activation>
    conn <innovation> <source> <target> <weight> <1|0>
    end

Weights are written with ``repr`` so a save/load round trip is lossless.
"""
from __future__ import annotations

import enum
import heapq
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ArityMismatch, CyclicGenome, GenomeFormatError, InvalidGenome

ACTIVATION_VERSION = "act-v1"


class Activation(str, enum.Enum):
    SINE = "sine"
    COSINE = "cosine"
    SIGMOID = "sigmoid"
    GAUSSIAN = "gaussian"
    LINEAR = "linear"
    ABS = "abs"

    def __call__(self, x):
        return _ACTIVATION_FUNCS[self](x)


_ACTIVATION_FUNCS = {
    Activation.SINE: np.sin,
    Activation.COSINE: np.cos,
    Activation.SIGMOID: expit,
    # clip so huge inputs underflow to 0 without an overflow warning
    Activation.GAUSSIAN: lambda x: np.exp(-np.square(np.clip(x, -40.0, 40.0))),
    Activation.LINEAR: lambda x: np.asarray(x, dtype=float) * 1.0,
    Activation.ABS: np.abs,
}

PERIODIC_ACTIVATIONS = frozenset({Activation.SINE, Activation.COSINE})


class NodeRole(str, enum.Enum):
    INPUT = "input"
    BIAS = "bias"
    HIDDEN = "hidden"
    OUTPUT = "output"


class GenomeKind(str, enum.Enum):
    SAM = "sam"
    CONTROLLER = "controller"
    # free arity; used for hand-built networks and tests
    GENERIC = "generic"


KIND_ARITY = {
    GenomeKind.SAM: (3, 2),
    GenomeKind.CONTROLLER: (4, 1),
}


@dataclass(frozen=True)
class NodeGene:
    id: int
    role: NodeRole
    activation: Activation = Activation.LINEAR


@dataclass(frozen=True)
class ConnectionGene:
    innovation: int
    source: int
    target: int
    weight: float
    enabled: bool = True


@dataclass(frozen=True)
class CppnGenome:
    kind: GenomeKind
    nodes: tuple[NodeGene, ...]
    connections: tuple[ConnectionGene, ...]
    input_arity: int
    output_arity: int

    @property
    def bias_id(self) -> int:
        return self.input_arity

    @property
    def input_ids(self) -> range:
        return range(self.input_arity)

    @property
    def output_ids(self) -> range:
        start = self.input_arity + 1
        return range(start, start + self.output_arity)

    @property
    def source_ids(self) -> range:
        """Inputs plus bias."""
        return range(self.input_arity + 1)

    def node_map(self) -> dict[int, NodeGene]:
        return {n.id: n for n in self.nodes}

    def hidden_nodes(self) -> list[NodeGene]:
        return [n for n in self.nodes if n.role is NodeRole.HIDDEN]

    def connection_map(self) -> dict[int, ConnectionGene]:
        return {c.innovation: c for c in self.connections}

    def replace(self, nodes=None, connections=None) -> "CppnGenome":
        return CppnGenome(
            self.kind,
            tuple(self.nodes if nodes is None else nodes),
            tuple(self.connections if connections is None else connections),
            self.input_arity,
            self.output_arity,
        )

    def validate(self) -> None:
        """Raise InvalidGenome (or CyclicGenome) if any genome invariant fails."""
        check_genome(self)


def arity_for(kind: GenomeKind, input_arity: int | None = None,
              output_arity: int | None = None) -> tuple[int, int]:
    kind = GenomeKind(kind)
    if kind is GenomeKind.GENERIC:
        if input_arity is None or output_arity is None:
            raise InvalidGenome("generic genomes need explicit arities")
        return input_arity, output_arity
    return KIND_ARITY[kind]


def minimal_genome(kind: GenomeKind, weights: Sequence[float] | None = None,
                   output_activation: Activation = Activation.LINEAR,
                   input_arity: int | None = None,
                   output_arity: int | None = None) -> CppnGenome:
    """Inputs and bias fully connected to the outputs, no hidden nodes.

    Initial connection from source ``s`` to output ``k`` gets innovation
    ``s * O + k`` so that every minimal genome of a kind shares numbering.
    """
    kind = GenomeKind(kind)
    n_in, n_out = arity_for(kind, input_arity, output_arity)
    n_conn = (n_in + 1) * n_out
    if weights is None:
        weights = [0.0] * n_conn
    if len(weights) != n_conn:
        raise ArityMismatch(f"expected {n_conn} weights, got {len(weights)}")
    activation = Activation(output_activation)
    nodes = [NodeGene(i, NodeRole.INPUT) for i in range(n_in)]
    nodes.append(NodeGene(n_in, NodeRole.BIAS))
    nodes += [NodeGene(n_in + 1 + k, NodeRole.OUTPUT, activation) for k in range(n_out)]
    conns = []
    for s in range(n_in + 1):
        for k in range(n_out):
            innov = s * n_out + k
            conns.append(ConnectionGene(innov, s, n_in + 1 + k, float(weights[innov])))
    return CppnGenome(kind, tuple(nodes), tuple(conns), n_in, n_out)


def initial_counters(kind: GenomeKind, input_arity: int | None = None,
                     output_arity: int | None = None) -> tuple[int, int]:
    """(next_innovation, next_node_id) after a minimal genome of ``kind``."""
    n_in, n_out = arity_for(kind, input_arity, output_arity)
    return (n_in + 1) * n_out, n_in + 1 + n_out


def _topological_order(node_ids: Iterable[int], edges: Iterable[tuple[int, int]]) -> list[int] | None:
    succ: dict[int, list[int]] = {n: [] for n in node_ids}
    indeg = {n: 0 for n in succ}
    for s, t in edges:
        succ[s].append(t)
        indeg[t] += 1
    ready = sorted(n for n, d in indeg.items() if d == 0)
    order = []
    heapq.heapify(ready)
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for t in succ[n]:
            indeg[t] -= 1
            if indeg[t] == 0:
                heapq.heappush(ready, t)
    if len(order) != len(indeg):
        return None
    return order


def creates_cycle(edges: Iterable[tuple[int, int]], source: int, target: int) -> bool:
    """True if adding ``source -> target`` to ``edges`` closes a directed cycle."""
    if source == target:
        return True
    adj: dict[int, list[int]] = {}
    for s, t in edges:
        adj.setdefault(s, []).append(t)
    stack, seen = [target], {target}
    while stack:
        n = stack.pop()
        if n == source:
            return True
        for m in adj.get(n, ()):
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return False


def check_genome(genome: CppnGenome) -> None:
    try:
        n_in, n_out = arity_for(genome.kind, genome.input_arity, genome.output_arity)
    except (ValueError, KeyError) as exc:
        raise InvalidGenome(f"bad kind {genome.kind!r}") from exc
    if (n_in, n_out) != (genome.input_arity, genome.output_arity):
        raise InvalidGenome(f"{genome.kind.value} genome must have arity {n_in}/{n_out}")
    nodes = genome.node_map()
    if len(nodes) != len(genome.nodes):
        raise InvalidGenome("duplicate node id")
    for i in genome.input_ids:
        if i not in nodes or nodes[i].role is not NodeRole.INPUT:
            raise InvalidGenome(f"node {i} must be an input")
    if genome.bias_id not in nodes or nodes[genome.bias_id].role is not NodeRole.BIAS:
        raise InvalidGenome("missing bias node")
    for o in genome.output_ids:
        if o not in nodes or nodes[o].role is not NodeRole.OUTPUT:
            raise InvalidGenome(f"node {o} must be an output")
    fixed = set(genome.source_ids) | set(genome.output_ids)
    for n in genome.nodes:
        if n.id not in fixed and n.role is not NodeRole.HIDDEN:
            raise InvalidGenome(f"node {n.id} has role {n.role.value} outside the fixed layout")
    innovs, pairs = set(), set()
    for c in genome.connections:
        if c.innovation in innovs:
            raise InvalidGenome(f"duplicate innovation {c.innovation}")
        innovs.add(c.innovation)
        if (c.source, c.target) in pairs:
            raise InvalidGenome(f"duplicate connection {c.source}->{c.target}")
        pairs.add((c.source, c.target))
        if c.source not in nodes or c.target not in nodes:
            raise InvalidGenome(f"connection {c.innovation} references a missing node")
        if nodes[c.target].role in (NodeRole.INPUT, NodeRole.BIAS):
            raise InvalidGenome(f"connection {c.innovation} targets an input")
        if nodes[c.source].role is NodeRole.OUTPUT:
            raise InvalidGenome(f"connection {c.innovation} leaves an output")
        if not np.isfinite(c.weight):
            raise InvalidGenome(f"connection {c.innovation} has non-finite weight")
    enabled = [(c.source, c.target) for c in genome.connections if c.enabled]
    if _topological_order(nodes, enabled) is None:
        raise CyclicGenome("enabled connections form a cycle")


@dataclass(frozen=True)
class CppnNetwork:
    """Evaluable feed-forward phenotype.

    ``steps`` holds, in topological order, each computed node with its
    activation and the (source, weight) pairs of its enabled in-edges.
    """
    input_arity: int
    output_arity: int
    bias_id: int
    output_ids: tuple[int, ...]
    steps: tuple[tuple[int, Activation, tuple[tuple[int, float], ...]], ...] = field(repr=False)

    def evaluate(self, inputs: Sequence[float]) -> np.ndarray:
        x = np.asarray(inputs, dtype=float)
        if x.ndim != 1 or x.shape[0] != self.input_arity:
            raise ArityMismatch(f"expected {self.input_arity} inputs, got shape {x.shape}")
        return self.evaluate_batch(x[None, :])[0]

    def evaluate_batch(self, inputs: np.ndarray) -> np.ndarray:
        """Evaluate many input rows at once; returns shape (N, output_arity)."""
        x = np.asarray(inputs, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_arity:
            raise ArityMismatch(f"expected (N, {self.input_arity}) inputs, got {x.shape}")
        n = x.shape[0]
        values = {i: x[:, i] for i in range(self.input_arity)}
        values[self.bias_id] = np.ones(n)
        for node_id, act, incoming in self.steps:
            total = np.zeros(n)
            for src, w in incoming:
                total = total + w * values[src]
            values[node_id] = act(total)
        return np.stack([values[o] for o in self.output_ids], axis=1)

    __call__ = evaluate


def build_phenotype(genome: CppnGenome) -> CppnNetwork:
    check_genome(genome)
    nodes = genome.node_map()
    enabled = sorted((c for c in genome.connections if c.enabled),
                     key=lambda c: (c.source, c.innovation))
    order = _topological_order(nodes, [(c.source, c.target) for c in enabled])
    if order is None:
        raise CyclicGenome("enabled connections form a cycle")
    incoming: dict[int, list[tuple[int, float]]] = {n: [] for n in nodes}
    for c in enabled:
        incoming[c.target].append((c.source, c.weight))
    sources = set(genome.source_ids)
    steps = tuple(
        (n, nodes[n].activation, tuple(incoming[n]))
        for n in order if n not in sources
    )
    return CppnNetwork(genome.input_arity, genome.output_arity, genome.bias_id,
                       tuple(genome.output_ids), steps)


def evaluate(network: CppnNetwork, inputs: Sequence[float]) -> np.ndarray:
    return network.evaluate(inputs)


# -- text format --------------------------------------------------------------

def dumps(genome: CppnGenome, single_line: bool = False) -> str:
    lines = [
        f"genome kind={genome.kind.value} inputs={genome.input_arity} "
        f"outputs={genome.output_arity} activations={ACTIVATION_VERSION}"
    ]
    for n in sorted(genome.nodes, key=lambda n: n.id):
        lines.append(f"node {n.id} {n.role.value} {n.activation.value}")
    for c in sorted(genome.connections, key=lambda c: c.innovation):
        lines.append(f"conn {c.innovation} {c.source} {c.target} {c.weight!r} {int(c.enabled)}")
    lines.append("end")
    return ";".join(lines) if single_line else "\n".join(lines) + "\n"


def loads(text: str) -> CppnGenome:
    rows = [r.strip() for r in text.replace(";", "\n").splitlines()]
    rows = [r for r in rows if r and not r.startswith("#")]
    if not rows or not rows[0].startswith("genome "):
        raise GenomeFormatError("missing genome header")
    if rows[-1] != "end":
        raise GenomeFormatError("missing end marker")
    try:
        header = dict(tok.split("=", 1) for tok in rows[0].split()[1:])
        if header.get("activations") != ACTIVATION_VERSION:
            raise GenomeFormatError(f"unsupported activation set {header.get('activations')!r}")
        kind = GenomeKind(header["kind"])
        n_in, n_out = int(header["inputs"]), int(header["outputs"])
        nodes, conns = [], []
        for row in rows[1:-1]:
            parts = row.split()
            if parts[0] == "node" and len(parts) == 4:
                nodes.append(NodeGene(int(parts[1]), NodeRole(parts[2]), Activation(parts[3])))
            elif parts[0] == "conn" and len(parts) == 6:
                if parts[5] not in ("0", "1"):
                    raise GenomeFormatError(f"bad enabled flag in {row!r}")
                conns.append(ConnectionGene(int(parts[1]), int(parts[2]), int(parts[3]),
                                            float(parts[4]), parts[5] == "1"))
            else:
                raise GenomeFormatError(f"unrecognised record {row!r}")
    except (KeyError, ValueError, IndexError) as exc:
        raise GenomeFormatError(str(exc)) from exc
    genome = CppnGenome(kind, tuple(nodes), tuple(conns), n_in, n_out)
    try:
        check_genome(genome)
    except InvalidGenome as exc:
        raise GenomeFormatError(f"invalid genome: {exc}") from exc
    return genome


def save(genome: CppnGenome, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(genome))


def load(path) -> CppnGenome:
    with open(path) as fh:
        return loads(fh.read())
