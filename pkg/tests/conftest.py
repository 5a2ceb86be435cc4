import sys
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

sys.path.insert(0, str(Path(__file__).parent))

from medusa.graph import ConstraintMatrix, FusionGraph, ObjectType, RelationMatrix


def make_type(tid, n):
    return ObjectType(tid, tuple(f"{tid.lower()}{i}" for i in range(n)))


def random_graph(seed, n_types=3, max_n=40, constraints=True):
    """Connected random fusion graph: a spanning path plus one extra edge."""
    rng = np.random.default_rng(seed)
    names = [f"T{j}" for j in range(n_types)]
    sizes = {t: int(rng.integers(8, max_n + 1)) for t in names}
    types = [make_type(t, sizes[t]) for t in names]
    pairs = [(names[j], names[j + 1]) for j in range(n_types - 1)] + [(names[0], names[-1])]
    rels = []
    for a, b in pairs:
        vals = rng.random((sizes[a], sizes[b])) * (rng.random((sizes[a], sizes[b])) < 0.7)
        rels.append(RelationMatrix(f"{a}-{b}", a, b, sp.csr_matrix(vals)))
    cons = []
    if constraints:
        # graph Laplacian: positive semidefinite, so the penalty is bounded below
        n = sizes[names[0]]
        adj = (rng.random((n, n)) < 0.2).astype(float)
        adj = np.triu(adj, 1)
        adj = adj + adj.T
        lap = np.diag(adj.sum(axis=1)) - adj
        cons.append(ConstraintMatrix("lap", names[0], sp.csr_matrix(0.01 * lap)))
    return FusionGraph.build(types, rels, cons)


def random_ranks(graph, seed, max_rank=4):
    rng = np.random.default_rng(seed + 1000)
    return {t: int(rng.integers(1, max_rank + 1)) for t in graph.types}


@pytest.fixture
def triangle():
    rng = np.random.default_rng(0)
    types = [make_type("S", 4), make_type("X", 3), make_type("T", 5)]
    rels = [
        RelationMatrix("S-X", "S", "X", sp.csr_matrix(rng.random((4, 3)))),
        RelationMatrix("X-T", "X", "T", sp.csr_matrix(rng.random((3, 5)))),
        RelationMatrix("S-T", "S", "T", sp.csr_matrix(rng.random((4, 5)))),
    ]
    return FusionGraph.build(types, rels)


_PIPELINES = {}


def synthetic_pipeline(spec, chains=("G-T", "G-C"), p=0.2):
    """Generate, normalize, factorize and materialize; cached per (spec, chains)."""
    from medusa.chains import edge_ends, materialize, parse_chain_spec
    from medusa.evaluation import generate_synthetic
    from medusa.factorization import FactorizationOptions, factorize, select_ranks
    from medusa.graph import normalize_matrix

    key = (spec, tuple(chains), p)
    if key not in _PIPELINES:
        graph, truth = generate_synthetic(spec)
        fitted = graph.map_relations(normalize_matrix)
        model = factorize(fitted, select_ranks(fitted, p), FactorizationOptions(seed=spec.seed, max_iterations=200))
        ends = edge_ends(graph)
        sems = [materialize(model, parse_chain_spec(ends, c)) for c in chains]
        module = [graph.type("G").index_of(lab) for lab in truth["module"]]
        _PIPELINES[key] = (graph, truth, sems, module)
    return _PIPELINES[key]


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
