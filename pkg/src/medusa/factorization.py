"""Collective non-negative matrix tri-factorization of a fusion graph.

Every relation matrix ``R[I,J]`` is approximated by ``G[I] @ S[I,J] @ G[J].T``
where each object type owns one non-negative factor ``G[I]`` shared by all
of its incident relations.  Constraint matrices regularize the factors
through ``trace(G[I].T @ Theta @ G[I])``.

Fitting alternates two block updates, each of which cannot increase the
objective:

* every ``S[I,J]`` is set to its least-squares optimum given the factors;
* every ``G[I]`` (in sorted type order) takes one multiplicative step whose
  numerator and denominator collect the positive and negative parts of the
  gradient, so the factor stays non-negative.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ._io import atomic_write_text
from .graph import FusionGraph, GraphError, read_matrix, write_matrix

logger = logging.getLogger(__name__)

DENOMINATOR_FLOOR = 1e-12
GRAM_JITTER = 1e-12
INIT_SCHEMES = ("random-uniform", "random-acol")


class FactorizationError(RuntimeError):
    """Numerical failure while fitting; carries the iteration index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class FactorizationOptions:
    max_iterations: int = 500
    rel_tolerance: float = 1e-5
    seed: int = 0
    init_scheme: str = "random-uniform"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.rel_tolerance > 0:
            raise ValueError("rel_tolerance must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}")


@dataclass
class LatentModel:
    factors: dict[str, np.ndarray]
    interactions: dict[str, np.ndarray]
    edges: dict[str, tuple[str, str]]
    rank_spec: dict[str, int]
    fit_log: list[float] = field(default_factory=list)
    options: FactorizationOptions | None = None

    @property
    def objective_value(self) -> float:
        return self.fit_log[-1] if self.fit_log else float("nan")


def select_ranks(graph: FusionGraph, p: float) -> dict[str, int]:
    """Latent dimension per type as a fraction ``p`` of its cardinality."""
    if not (0 < p <= 1):
        raise ValueError(f"p must lie in (0, 1], got {p}")
    return {tid: max(1, int(round(p * t.cardinality))) for tid, t in graph.types.items()}


def check_ranks(graph: FusionGraph, ranks: Mapping[str, int]) -> dict[str, int]:
    out = {}
    for tid, t in graph.types.items():
        if tid not in ranks:
            raise ValueError(f"no rank given for type {tid!r}")
        k = int(ranks[tid])
        if not 1 <= k <= t.cardinality:
            raise ValueError(f"rank for type {tid!r} must lie in [1, {t.cardinality}], got {k}")
        out[tid] = k
    return out


def reconstruct(model: LatentModel, edge_id: str) -> np.ndarray:
    try:
        src, dst = model.edges[edge_id]
    except KeyError:
        raise KeyError(f"unknown edge {edge_id!r}") from None
    return model.factors[src] @ model.interactions[edge_id] @ model.factors[dst].T


def objective(graph: FusionGraph, model: LatentModel) -> float:
    """Sum of squared reconstruction errors plus constraint traces."""
    total = 0.0
    for eid, r in graph.relations.items():
        g_src, g_dst = model.factors[r.source], model.factors[r.target]
        s = model.interactions[eid]
        if g_src.shape[1] != s.shape[0] or g_dst.shape[1] != s.shape[1]:
            raise ValueError(f"shape mismatch for edge {eid!r}")
        if g_src.shape[0] != r.shape[0] or g_dst.shape[0] != r.shape[1]:
            raise ValueError(f"shape mismatch for edge {eid!r}")
        resid = r.values.toarray() - g_src @ s @ g_dst.T
        total += float(np.sum(resid * resid))
    for c in graph.constraints.values():
        g = model.factors[c.type]
        total += float(np.sum(g * (c.values @ g)))
    return total


class _Problem:
    """Dense copies of the graph's matrices in a fixed iteration order."""

    def __init__(self, graph: FusionGraph):
        self.graph = graph
        self.type_ids = sorted(graph.types)
        self.edge_ids = sorted(graph.relations)
        self.R = {eid: graph.relations[eid].values.toarray() for eid in self.edge_ids}
        self.ends = {eid: (graph.relations[eid].source, graph.relations[eid].target) for eid in self.edge_ids}
        self.theta = {}
        for tid in self.type_ids:
            cons = graph.constraints_of(tid)
            if cons:
                t = sum(c.values.toarray() for c in cons)
                self.theta[tid] = 0.5 * (t + t.T)

    def objective(self, G, S) -> float:
        total = 0.0
        for eid in self.edge_ids:
            a, b = self.ends[eid]
            resid = self.R[eid] - G[a] @ S[eid] @ G[b].T
            total += float(np.sum(resid * resid))
        for tid, th in self.theta.items():
            total += float(np.sum(G[tid] * (th @ G[tid])))
        return total


def _initialize(prob: _Problem, ranks, opts: FactorizationOptions):
    rng = np.random.default_rng(opts.seed)
    G = {}
    for tid in prob.type_ids:
        n, k = prob.graph.cardinality(tid), ranks[tid]
        blocks = []
        for eid in prob.edge_ids:
            a, b = prob.ends[eid]
            if a == tid:
                blocks.append(prob.R[eid])
            elif b == tid:
                blocks.append(prob.R[eid].T)
        data = np.hstack(blocks) if blocks else np.ones((n, 1))
        scale = float(np.mean(np.abs(data)))
        if scale <= 0:
            scale = 1.0
        if opts.init_scheme == "random-uniform":
            g = rng.random((n, k)) * np.sqrt(scale / k)
        else:
            width = max(1, data.shape[1] // 5)
            g = np.empty((n, k))
            for j in range(k):
                cols = rng.choice(data.shape[1], size=width, replace=False)
                g[:, j] = np.abs(data[:, cols]).mean(axis=1)
            # keep every entry strictly positive so multiplicative steps can move it
            g += 1e-3 * scale * rng.random((n, k))
        G[tid] = g
    return G


def _update_interactions(prob: _Problem, G, S):
    grams = {tid: G[tid].T @ G[tid] for tid in prob.type_ids}
    for eid in prob.edge_ids:
        a, b = prob.ends[eid]
        ga, gb = G[a], G[b]
        rhs = ga.T @ prob.R[eid] @ gb
        left = np.linalg.solve(grams[a] + GRAM_JITTER * np.eye(ga.shape[1]), rhs)
        S[eid] = np.linalg.solve(grams[b] + GRAM_JITTER * np.eye(gb.shape[1]), left.T).T


def _update_factor(prob: _Problem, tid: str, G, S):
    g = G[tid]
    k = g.shape[1]
    P = np.zeros_like(g)
    M = np.zeros((k, k))
    for eid in prob.edge_ids:
        a, b = prob.ends[eid]
        if a == tid:
            B = G[b] @ S[eid].T
            P += prob.R[eid] @ B
        elif b == tid:
            B = G[a] @ S[eid]
            P += prob.R[eid].T @ B
        else:
            continue
        M += B.T @ B
    pos = lambda x: (np.abs(x) + x) / 2.0  # noqa: E731
    neg = lambda x: (np.abs(x) - x) / 2.0  # noqa: E731
    numer = pos(P) + g @ neg(M)
    denom = neg(P) + g @ pos(M)
    th = prob.theta.get(tid)
    if th is not None:
        numer += neg(th) @ g
        denom += pos(th) @ g
    G[tid] = g * np.sqrt(numer / np.maximum(denom, DENOMINATOR_FLOOR))


def factorize(
    graph: FusionGraph,
    ranks: Mapping[str, int],
    opts: FactorizationOptions | None = None,
) -> LatentModel:
    """Fit the latent model; ``fit_log`` holds the objective after each sweep.

    Entry 0 is the objective after initialization (with optimal ``S``).
    """
    opts = opts or FactorizationOptions()
    ranks = check_ranks(graph, ranks)
    prob = _Problem(graph)
    G = _initialize(prob, ranks, opts)
    S: dict[str, np.ndarray] = {}
    _update_interactions(prob, G, S)
    fit_log = [prob.objective(G, S)]
    # overflow surfaces as non-finite values, which are checked explicitly
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, opts.max_iterations + 1):
            for tid in prob.type_ids:
                _update_factor(prob, tid, G, S)
                if not np.all(np.isfinite(G[tid])):
                    raise FactorizationError(f"non-finite values in factor {tid!r}", it)
            _update_interactions(prob, G, S)
            obj = prob.objective(G, S)
            if not np.isfinite(obj):
                raise FactorizationError("non-finite objective", it)
            prev = fit_log[-1]
            fit_log.append(obj)
            if abs(prev - obj) / max(prev, 1e-12) < opts.rel_tolerance:
                break
    logger.info("factorization stopped after %d iterations, objective %.6g", len(fit_log) - 1, fit_log[-1])
    return LatentModel(
        factors=G,
        interactions=S,
        edges=dict(prob.ends),
        rank_spec=ranks,
        fit_log=fit_log,
        options=opts,
    )


# ---------------------------------------------------------------------------
# Persistence


def save_model(model: LatentModel, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for tid, g in sorted(model.factors.items()):
        write_matrix(directory / f"factor_{tid}.mtx", g)
    for eid, s in sorted(model.interactions.items()):
        write_matrix(directory / f"interaction_{eid}.mtx", s)
    opts = model.options or FactorizationOptions()
    doc = {
        "ranks": model.rank_spec,
        "edges": {eid: list(ends) for eid, ends in sorted(model.edges.items())},
        "seed": opts.seed,
        "options": {
            "max_iterations": opts.max_iterations,
            "rel_tolerance": opts.rel_tolerance,
            "seed": opts.seed,
            "init_scheme": opts.init_scheme,
        },
        "iterations": len(model.fit_log) - 1,
        "final_objective": model.objective_value,
        "fit_log": model.fit_log,
    }
    path = directory / "model.json"
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_model(directory: str | os.PathLike) -> LatentModel:
    directory = Path(directory)
    path = directory / "model.json"
    if not path.is_file():
        raise GraphError(f"missing model manifest: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    factors = {
        tid: read_matrix(directory / f"factor_{tid}.mtx", f"factor {tid}").toarray()
        for tid in doc["ranks"]
    }
    interactions = {
        eid: read_matrix(directory / f"interaction_{eid}.mtx", f"interaction {eid}").toarray()
        for eid in doc["edges"]
    }
    return LatentModel(
        factors=factors,
        interactions=interactions,
        edges={eid: tuple(ends) for eid, ends in doc["edges"].items()},
        rank_spec={k: int(v) for k, v in doc["ranks"].items()},
        fit_log=[float(x) for x in doc["fit_log"]],
        options=FactorizationOptions(**doc["options"]),
    )
