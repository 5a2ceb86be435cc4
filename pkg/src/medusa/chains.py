"""Chains through the fusion graph and their materialization.

A chain is a walk over relation edges, each traversed forward (source to
target) or in reverse.  Materializing a chain multiplies the reconstructed
relation matrices along the walk and turns the product into a
row-stochastic candidate-by-context matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .factorization import LatentModel, reconstruct
from .graph import FusionGraph, GraphError, row_stochastic

ARROW = "→"


@dataclass(frozen=True)
class Step:
    edge_id: str
    reverse: bool = False

    def __str__(self):
        return self.edge_id + ("!" if self.reverse else "")


@dataclass(frozen=True)
class Chain:
    steps: tuple[Step, ...]
    types: tuple[str, ...]  # visited object types, len(steps) + 1

    @property
    def source(self) -> str:
        return self.types[0]

    @property
    def target(self) -> str:
        return self.types[-1]

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def label(self) -> str:
        return ARROW.join(self.types)

    @property
    def spec(self) -> str:
        return " > ".join(str(s) for s in self.steps)

    def reversed(self) -> "Chain":
        return Chain(
            tuple(Step(s.edge_id, not s.reverse) for s in reversed(self.steps)),
            tuple(reversed(self.types)),
        )

    @classmethod
    def from_steps(cls, ends: dict[str, tuple[str, str]], steps) -> "Chain":
        """Build a chain from ``(edge_id, reverse)`` pairs, checking adjacency.

        ``ends`` maps each edge id to its ``(source, target)`` types.
        """
        steps = tuple(s if isinstance(s, Step) else Step(*s) for s in steps)
        if not steps:
            raise GraphError("a chain needs at least one step")
        types: list[str] = []
        for j, step in enumerate(steps):
            if step.edge_id not in ends:
                raise GraphError(f"unknown relation {step.edge_id!r} in chain")
            a, b = ends[step.edge_id]
            if step.reverse:
                a, b = b, a
            if j == 0:
                types.append(a)
            elif types[-1] != a:
                raise GraphError(
                    f"step {j + 1} ({step}) departs from {a!r} but the chain is at {types[-1]!r}"
                )
            types.append(b)
        return cls(steps, tuple(types))


@dataclass(frozen=True)
class MaterializedChain:
    chain: Chain
    values: np.ndarray

    @property
    def semantic_label(self) -> str:
        return self.chain.label

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def edge_ends(graph: FusionGraph) -> dict[str, tuple[str, str]]:
    return {eid: (r.source, r.target) for eid, r in graph.relations.items()}


def parse_chain_spec(ends: dict[str, tuple[str, str]], spec: str) -> Chain:
    """Parse ``edge_id[!]( > edge_id[!])*``; ``!`` marks reverse traversal."""
    steps = []
    for part in spec.split(">"):
        token = part.strip()
        if not token:
            raise GraphError(f"empty step in chain spec {spec!r}")
        reverse = token.endswith("!")
        steps.append(Step(token.rstrip("!").strip(), reverse))
    return Chain.from_steps(ends, steps)


def enumerate_chains(graph: FusionGraph, source: str, target: str, max_length: int) -> list[Chain]:
    """All chains from ``source`` to ``target`` with at most ``max_length`` steps.

    A relation is never traversed twice.  Intermediate types do not repeat,
    except that the source and the target type may each appear once as an
    intermediate.  Output is sorted by step list.
    """
    graph.type(source)
    graph.type(target)
    if max_length < 1:
        raise ValueError("max_length must be >= 1")
    ends = edge_ends(graph)
    moves: dict[str, list[tuple[Step, str]]] = {t: [] for t in graph.types}
    for eid, (a, b) in sorted(ends.items()):
        moves[a].append((Step(eid, False), b))
        moves[b].append((Step(eid, True), a))

    found: list[Chain] = []

    def walk(at: str, steps: list[Step], types: list[str], used: set[str]):
        for step, nxt in moves[at]:
            if step.edge_id in used:
                continue
            path_steps = steps + [step]
            path_types = types + [nxt]
            if nxt == target:
                found.append(Chain(tuple(path_steps), tuple(path_types)))
            if len(path_steps) < max_length and _may_pass(nxt, path_types[1:], source, target):
                used.add(step.edge_id)
                walk(nxt, path_steps, path_types, used)
                used.discard(step.edge_id)

    walk(source, [], [source], set())
    found.sort(key=lambda c: [(s.edge_id, s.reverse) for s in c.steps])
    return found


def _may_pass(node: str, visited_after_source: list[str], source: str, target: str) -> bool:
    # visited_after_source ends with ``node``; count earlier intermediate visits
    seen = visited_after_source.count(node)
    if node in (source, target):
        return seen <= 1
    return seen == 1


def chain_product(model: LatentModel, chain: Chain, method: str = "latent") -> np.ndarray:
    """Unnormalized product of reconstructed matrices along ``chain``.

    ``method="latent"`` contracts the small interaction and Gram matrices
    first and expands to ``n_source x n_target`` once; ``method="naive"``
    multiplies the full reconstructions left to right.
    """
    if method == "naive":
        out = None
        for step in chain.steps:
            r = reconstruct(model, step.edge_id)
            r = r.T if step.reverse else r
            out = r if out is None else out @ r
        return out
    if method != "latent":
        raise ValueError(f"unknown method {method!r}")
    core = None
    for j, step in enumerate(chain.steps):
        s = model.interactions[step.edge_id]
        s = s.T if step.reverse else s
        if core is None:
            core = s
        else:
            g = model.factors[chain.types[j]]
            core = core @ (g.T @ g) @ s
    return model.factors[chain.source] @ core @ model.factors[chain.target].T


def materialize(model: LatentModel, chain: Chain) -> MaterializedChain:
    for step in chain.steps:
        if step.edge_id not in model.interactions:
            raise GraphError(f"relation {step.edge_id!r} is not part of the model")
    values = chain_product(model, chain)
    expected = (model.factors[chain.source].shape[0], model.factors[chain.target].shape[0])
    assert values.shape == expected, (values.shape, expected)
    return MaterializedChain(chain, row_stochastic(values))
