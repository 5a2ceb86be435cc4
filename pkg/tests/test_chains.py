from importlib import resources

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_type, random_graph, random_ranks
from medusa.chains import (
    Chain,
    Step,
    chain_product,
    edge_ends,
    enumerate_chains,
    materialize,
    parse_chain_spec,
)
from medusa.factorization import FactorizationOptions, factorize, reconstruct
from medusa.graph import FusionGraph, GraphError, RelationMatrix, load_fusion_graph, row_stochastic


def relational_map():
    """Solid-edge part of the gene/disease relational map, plus six leaf types."""
    names = {1: "G", 2: "D", 3: "C", 4: "P", 5: "GO", 6: "E", 7: "DS"}
    names.update({i: f"M{i}" for i in range(8, 14)})
    edges = [(1, 5), (1, 3), (1, 4), (2, 6), (2, 7), (3, 2), (3, 4), (5, 3), (5, 6)]
    edges += [(1, i) for i in range(8, 14)]
    types = [make_type(n, 2) for n in names.values()]
    rels = [
        RelationMatrix(f"R{a}_{b}", names[a], names[b], sp.csr_matrix(np.ones((2, 2)))) for a, b in edges
    ]
    return FusionGraph.build(types, rels)


@pytest.fixture(scope="module")
def model():
    g = random_graph(11, n_types=4, max_n=12)
    return g, factorize(g, random_ranks(g, 11), FactorizationOptions(max_iterations=30, seed=0))


class TestSpec:
    def test_parse(self, triangle):
        c = parse_chain_spec(edge_ends(triangle), "S-X > X-T")
        assert c.types == ("S", "X", "T")
        assert c.label == "S→X→T"
        assert c.spec == "S-X > X-T"

    def test_reverse_step(self, triangle):
        c = parse_chain_spec(edge_ends(triangle), "X-T! > S-X!")
        assert c.steps == (Step("X-T", True), Step("S-X", True))
        assert c.label == "T→X→S"
        assert c.reversed() == parse_chain_spec(edge_ends(triangle), "S-X > X-T")

    @pytest.mark.parametrize("spec, match", [("S-X > S-T", "departs from 'S'"), ("S-Q", "unknown relation"), ("S-X >", "empty step")])
    def test_invalid(self, triangle, spec, match):
        with pytest.raises(GraphError, match=match):
            parse_chain_spec(edge_ends(triangle), spec)

    def test_round_trip(self, triangle):
        ends = edge_ends(triangle)
        for c in enumerate_chains(triangle, "S", "T", 3):
            assert parse_chain_spec(ends, c.spec) == c


class TestEnumerate:
    def test_single_edge(self):
        g = FusionGraph.build([make_type("S", 2), make_type("T", 2)], [RelationMatrix("e", "S", "T", sp.csr_matrix(np.ones((2, 2))))])
        chains = enumerate_chains(g, "S", "T", 1)
        assert [c.spec for c in chains] == ["e"]

    def test_triangle(self, triangle):
        chains = enumerate_chains(triangle, "S", "T", 2)
        assert sorted(c.label for c in chains) == ["S→T", "S→X→T"]

    def test_gene_disease_count(self):
        assert len(enumerate_chains(relational_map(), "G", "D", 5)) == 6

    def test_six_step_chain_needs_length_six(self):
        labels = {c.label for c in enumerate_chains(relational_map(), "G", "D", 6)}
        assert "G→C→P→G→GO→E→D" in labels
        assert len(labels) == 8

    def test_gene_to_all_types_count(self):
        g = relational_map()
        assert sum(len(enumerate_chains(g, "G", t, 2)) for t in g.types if t != "G") == 15

    def test_bundled_gene_disease(self):
        g = load_fusion_graph(resources.files("medusa") / "data" / "genedisease" / "manifest.json")
        assert len(enumerate_chains(g, "G", "D", 5)) == 6

    def test_unknown_type(self, triangle):
        with pytest.raises(GraphError):
            enumerate_chains(triangle, "S", "Z", 2)

    def test_bad_length(self, triangle):
        with pytest.raises(ValueError):
            enumerate_chains(triangle, "S", "T", 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 200), st.integers(1, 5))
    def test_well_formed(self, seed, max_len):
        g = random_graph(seed, n_types=4, max_n=10)
        names = sorted(g.types)
        chains = enumerate_chains(g, names[0], names[-1], max_len)
        ends = edge_ends(g)
        assert len({c.steps for c in chains}) == len(chains)
        assert chains == sorted(chains, key=lambda c: [(s.edge_id, s.reverse) for s in c.steps])
        for c in chains:
            assert 1 <= c.length <= max_len
            assert Chain.from_steps(ends, c.steps) == c
            edge_ids = [s.edge_id for s in c.steps]
            assert len(set(edge_ids)) == len(edge_ids)
            inner = c.types[1:-1]
            for t in set(inner):
                assert inner.count(t) <= 1


class TestMaterialize:
    def test_length_one(self, model):
        g, m = model
        eid = sorted(g.relations)[0]
        c = parse_chain_spec(edge_ends(g), eid)
        np.testing.assert_allclose(materialize(m, c).values, row_stochastic(reconstruct(m, eid)), rtol=1e-12)

    def test_row_stochastic(self, model):
        g, m = model
        names = sorted(g.types)
        for c in enumerate_chains(g, names[0], names[2], 3):
            mc = materialize(m, c)
            assert mc.shape == (g.cardinality(c.source), g.cardinality(c.target))
            assert np.all(mc.values >= 0)
            np.testing.assert_allclose(mc.values.sum(axis=1), 1.0, atol=1e-12)
            assert mc.semantic_label == c.label

    def test_latent_matches_naive(self, model):
        g, m = model
        names = sorted(g.types)
        for c in enumerate_chains(g, names[0], names[1], 4):
            latent = chain_product(m, c)
            naive = chain_product(m, c, method="naive")
            np.testing.assert_allclose(latent, naive, rtol=1e-8, atol=1e-8 * np.abs(naive).max())

    def test_reverse_transpose(self, model):
        g, m = model
        names = sorted(g.types)
        for c in enumerate_chains(g, names[0], names[-1], 3):
            fwd = chain_product(m, c)
            back = chain_product(m, c.reversed())
            assert np.max(np.abs(back - fwd.T)) <= 1e-10 * max(1.0, np.abs(fwd).max())

    def test_edge_missing_from_model(self, model, triangle):
        _, m = model
        with pytest.raises(GraphError, match="not part of the model"):
            materialize(m, parse_chain_spec(edge_ends(triangle), "S-T"))

    def test_unknown_method(self, model):
        g, m = model
        with pytest.raises(ValueError):
            chain_product(m, parse_chain_spec(edge_ends(g), sorted(g.relations)[0]), method="fast")
