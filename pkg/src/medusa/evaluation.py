"""Evaluation protocols, ranking metrics, synthetic data and exhaustive oracles."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .detection import DetectionConfig, Module, _map, _matrices, detect, module_value, visibility_decay
from .detection import cpe_semantic_weights, cpi_semantic_weights, combine_scores
from .graph import FusionGraph, ObjectType, RelationMatrix
from .scoring import PivotState, p_cpe, p_cpi

logger = logging.getLogger(__name__)

REMOVAL_FRACTIONS = (0.25, 0.5, 0.75)
DEFAULT_GRID = {"alpha": (0.25, 0.5, 0.75), "beta": (0.01, 0.05, 0.1), "q": (5, 10, 20)}


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Ranking metrics (lower score = better candidate)


@dataclass(frozen=True)
class RankingMetrics:
    auroc: float
    auprc: float
    n_pos: int
    n_neg: int


def _split(scores):
    pos = np.array([v for v, y in scores if y], dtype=np.float64)
    neg = np.array([v for v, y in scores if not y], dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise EvaluationError("need at least one positive and one negative")
    return pos, neg


def auroc(scores: Sequence[tuple[float, bool]]) -> float:
    """Probability that a positive scores lower than a negative; ties count half."""
    pos, neg = _split(scores)
    better = (pos[:, None] < neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((better + 0.5 * ties) / (len(pos) * len(neg)))


def auprc(scores: Sequence[tuple[float, bool]]) -> float:
    """Average precision of the ascending-score ranking (ties keep input order)."""
    _split(scores)
    values = np.array([v for v, _ in scores], dtype=np.float64)
    labels = np.array([bool(y) for _, y in scores])
    order = np.argsort(values, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, len(ranks) + 1) / ranks
    return float(precision.mean())


def ranking_metrics(scores) -> RankingMetrics:
    pos, neg = _split(scores)
    return RankingMetrics(auroc(scores), auprc(scores), len(pos), len(neg))


# ---------------------------------------------------------------------------
# Synthetic fusion graphs


@dataclass(frozen=True)
class SyntheticSpec:
    """Four-type toy system: genes, terms, chemicals, diseases.

    ``signal`` scales a latent component shared by the planted gene module,
    a block of terms and the planted diseases.  Chemicals carry no planted
    structure, so gene-chemical chains are a pure-noise semantic.
    """

    seed: int = 0
    cardinalities: tuple[tuple[str, int], ...] = (("G", 60), ("T", 30), ("C", 25), ("D", 20))
    density: float = 0.9
    module_size: int = 8
    signal: float = 3.0
    noise: float = 0.3
    rank: int = 3
    membership: float = 0.4
    planted_terms: int = 6
    planted_diseases: int = 3

    def __post_init__(self):
        sizes = dict(self.cardinalities)
        if set(sizes) != {"G", "T", "C", "D"}:
            raise ValueError("cardinalities must cover types G, T, C, D")
        if not 0 < self.membership <= 1:
            raise ValueError("membership must lie in (0, 1]")
        if not 0 < self.density <= 1:
            raise ValueError("density must lie in (0, 1]")
        if self.signal < 0 or self.noise < 0:
            raise ValueError("signal and noise must be non-negative")
        if not 1 <= self.module_size <= sizes["G"]:
            raise ValueError("module_size must not exceed the number of genes")
        if not 1 <= self.planted_terms <= sizes["T"]:
            raise ValueError("planted_terms must not exceed the number of terms")
        if not 1 <= self.planted_diseases <= sizes["D"]:
            raise ValueError("planted_diseases must not exceed the number of diseases")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cardinalities"] = dict(self.cardinalities)
        return d


SYNTHETIC_EDGES = (("G-T", "G", "T"), ("G-C", "G", "C"), ("C-D", "C", "D"), ("T-D", "T", "D"))


def generate_synthetic(spec: SyntheticSpec) -> tuple[FusionGraph, dict]:
    """Build a toy fusion graph from planted low-rank factors plus noise."""
    rng = np.random.default_rng(spec.seed)
    sizes = dict(spec.cardinalities)
    k = spec.rank
    # sparse background memberships: each entity loads on few components
    latent = {}
    for t, n in sorted(sizes.items()):
        base = rng.random((n, k + 1)) * (rng.random((n, k + 1)) < spec.membership)
        base[:, k] = 0.0
        latent[t] = base
    module = np.sort(rng.choice(sizes["G"], size=spec.module_size, replace=False))
    terms = np.sort(rng.choice(sizes["T"], size=spec.planted_terms, replace=False))
    diseases = np.sort(rng.choice(sizes["D"], size=spec.planted_diseases, replace=False))
    latent["G"][module, k] = spec.signal
    latent["T"][terms, k] = 1.0
    latent["D"][diseases, k] = 1.0

    relations = []
    for eid, a, b in SYNTHETIC_EDGES:
        mix = np.eye(k + 1) + 0.1 * rng.random((k + 1, k + 1))
        if "C" in (a, b):
            # chemicals see no planted component
            mix[k, :] = 0.0
            mix[:, k] = 0.0
        clean = latent[a] @ mix @ latent[b].T
        noisy = clean + spec.noise * rng.random(clean.shape)
        mask = rng.random(clean.shape) < spec.density
        relations.append(RelationMatrix(eid, a, b, sp.csr_matrix(noisy * mask)))

    prefixes = {"G": "gene", "T": "term", "C": "chem", "D": "disease"}
    types = [
        ObjectType(t, tuple(f"{prefixes[t]}{i:03d}" for i in range(n))) for t, n in sorted(sizes.items())
    ]
    graph = FusionGraph.build(types, relations)
    truth = {
        "module": [graph.types["G"].labels[i] for i in module],
        "terms": [graph.types["T"].labels[i] for i in terms],
        "diseases": [graph.types["D"].labels[i] for i in diseases],
    }
    return graph, truth


# ---------------------------------------------------------------------------
# Scoring helpers shared by the protocols


def score_candidates(mats, pivots: Sequence[int], candidates: Sequence[int], config: DetectionConfig) -> list[float]:
    """Size-1 module probabilities of ``candidates`` (combined over semantics)."""
    candidates = list(candidates)
    if config.regime == "cpe":
        state = PivotState(tuple(pivots), config.alpha)
        per = [_map(lambda i, C=C: p_cpe(C, state, i, config.q).p_value, candidates) for C in mats]
        if len(mats) == 1:
            return per[0]
        pool = [i for i in range(mats[0].shape[0]) if i not in set(state.original)]
        return combine_scores(per, cpe_semantic_weights(mats, state, pool, config.q))
    per = [_map(lambda i, C=C: p_cpi(C, pivots, i).p_value, candidates) for C in mats]
    if len(mats) == 1:
        return per[0]
    return combine_scores(per, cpi_semantic_weights(mats, pivots))


@dataclass(frozen=True)
class Case:
    name: str
    positives: tuple[int, ...]  # candidate rows
    pivots: tuple[int, ...] = ()  # context columns; CPI only


def loocv_association(semantics, cases: Sequence[Case], config: DetectionConfig) -> dict[str, RankingMetrics]:
    """Leave-one-out association prediction, one RankingMetrics per case.

    CPE: each positive is held out in turn, the remaining positives act as
    pivots, and the held-out member is ranked against all non-positives
    scored in the same fold.  Per-fold AUROC and AP are averaged.
    CPI: pivots are the case's context columns and do not involve the
    positives, so all positives are ranked against all non-positives once.
    Cases with fewer than two positives are skipped.
    """
    return {name: metrics for name, (metrics, _) in loocv_details(semantics, cases, config).items()}


def loocv_details(semantics, cases: Sequence[Case], config: DetectionConfig):
    """Like :func:`loocv_association` but also returns the pooled ``(score, is_positive)`` pairs."""
    mats, _ = _matrices(semantics)
    n = mats[0].shape[0]
    out = {}
    for case in cases:
        positives = sorted(set(case.positives))
        if len(positives) < 2:
            logger.warning("case %r has fewer than two positives; skipped", case.name)
            continue
        pos_set = set(positives)
        negatives = [i for i in range(n) if i not in pos_set]
        if not negatives:
            logger.warning("case %r has no negatives; skipped", case.name)
            continue
        if config.regime == "cpi":
            if not case.pivots:
                raise EvaluationError(f"case {case.name!r} needs pivot columns in the cpi regime")
            cands = positives + negatives
            scores = score_candidates(mats, case.pivots, cands, config)
            pairs = [(s, i in pos_set) for s, i in zip(scores, cands)]
            out[case.name] = (ranking_metrics(pairs), pairs)
            continue
        rocs, aps, pooled = [], [], []
        for held in positives:
            train = [p for p in positives if p != held]
            scores = score_candidates(mats, train, [held] + negatives, config)
            pairs = [(scores[0], True)] + [(s, False) for s in scores[1:]]
            rocs.append(auroc(pairs))
            aps.append(auprc(pairs))
            pooled.extend(pairs)
        metrics = RankingMetrics(float(np.mean(rocs)), float(np.mean(aps)), len(positives), len(negatives))
        out[case.name] = (metrics, pooled)
    return out


@dataclass
class RecoveryReport:
    removal_fraction: float
    recall_at_k: float
    module: Module
    held_out: list[int]
    pivots: list[int]


def module_recovery(
    semantics,
    truth: Sequence[int],
    fraction: float,
    config: DetectionConfig,
    seed: int = 0,
) -> RecoveryReport | None:
    """Hide a random fraction of a known module and try to grow it back.

    The remaining members are pivots and ``k`` is the full module size.
    Returns ``None`` when the fraction removes nobody.
    """
    if not 0 < fraction < 1:
        raise EvaluationError(f"fraction must lie in (0, 1), got {fraction}")
    truth = sorted(set(int(t) for t in truth))
    if len(truth) < 4:
        raise EvaluationError("truth module needs at least 4 members")
    n_out = int(math.floor(fraction * len(truth)))
    if n_out == 0:
        logger.warning("fraction %.3g removes no members; recovery skipped", fraction)
        return None
    rng = np.random.default_rng(seed)
    held = sorted(int(i) for i in rng.choice(truth, size=n_out, replace=False))
    pivots = [t for t in truth if t not in set(held)]
    cfg = replace(config, regime="cpe", k=len(truth))
    module = detect(semantics, pivots, cfg)
    recall = len(set(module.indices) & set(held)) / len(held)
    return RecoveryReport(fraction, recall, module, held, pivots)


# ---------------------------------------------------------------------------
# Exhaustive oracle


def ordered_value(mats, pivots: Sequence[int], order: Sequence[int], config: DetectionConfig) -> tuple[float, list[float]]:
    """Valuation of adding ``order`` one by one, evolving pivot state as greedy would."""
    ps: list[float] = []
    if config.regime == "cpe":
        state = PivotState(tuple(pivots), config.alpha)
        pool = [i for i in range(mats[0].shape[0]) if i not in set(state.original)]
        for r, i in enumerate(order, start=1):
            per = [p_cpe(C, state, i, config.q).p_value for C in mats]
            w = cpe_semantic_weights(mats, state, pool, config.q) if len(mats) > 1 else [1.0]
            ps.append(float(np.dot(w, per)))
            state.accrete(i, r)
            pool.remove(i)
    else:
        w = cpi_semantic_weights(mats, pivots) if len(mats) > 1 else [1.0]
        history: list[int] = []
        for i in order:
            per = [p_cpi(C, pivots, i, visibility_decay(i, history, config.beta, C)).p_value for C in mats]
            ps.append(float(np.dot(w, per)))
            history.append(i)
    return module_value(ps), ps


def brute_force_best_module(semantics, pivots: Sequence[int], config: DetectionConfig, max_candidates: int = 12):
    """Best ordered size-k module by exhaustive enumeration (toy scale only)."""
    mats, _ = _matrices(semantics)
    n = mats[0].shape[0]
    if config.regime == "cpe":
        pool = [i for i in range(n) if i not in set(pivots)]
    else:
        pool = list(range(n))
    if len(pool) > max_candidates or config.k > 3:
        raise EvaluationError("instance too large for exhaustive search")
    best_order: tuple[int, ...] = ()
    best_value = -math.inf
    for order in itertools.permutations(pool, min(config.k, len(pool))):
        value, _ = ordered_value(mats, pivots, order, config)
        if value > best_value:
            best_value, best_order = value, order
    return list(best_order), best_value


# ---------------------------------------------------------------------------
# Parameter selection


def grid_search(semantics, case: Case, config: DetectionConfig, grid: Mapping[str, Sequence] | None = None):
    """Pick the parameter combination with the best mean LOOCV AUPRC on ``case``.

    Only parameters relevant to the regime are searched; ``q`` values larger
    than the number of context columns are skipped.
    """
    grid = dict(grid or DEFAULT_GRID)
    mats, _ = _matrices(semantics)
    names = ["alpha", "q"] if config.regime == "cpe" else ["beta"]
    best, best_score = config, -math.inf
    for combo in itertools.product(*(grid[k] for k in names)):
        params = dict(zip(names, combo))
        if params.get("q", 1) > min(C.shape[1] for C in mats):
            continue
        cfg = replace(config, **params)
        res = loocv_association(mats, [case], cfg)
        if case.name not in res:
            continue
        if res[case.name].auprc > best_score:
            best, best_score = cfg, res[case.name].auprc
    return best, best_score
