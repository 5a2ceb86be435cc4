"""Greedy growth of maximally significant size-k modules.

Same-type pivots (CPE): candidates are the non-pivot rows of a chain
matrix; every selected member joins the pivot set with a decayed weight.
Cross-type pivots (CPI): pivots are columns, candidates are all rows, and a
candidate's visibility shrinks with its similarity to earlier selections.

Several chains can be scored together; per-chain p values are then averaged
with weights that favour chains in which the pivots look coherent.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .chains import MaterializedChain
from .scoring import PivotState, kl_divergence, p_cpe, p_cpi

logger = logging.getLogger(__name__)

REGIMES = ("cpe", "cpi")
COMBINATIONS = ("single", "combined")
P_FLOOR = 1e-300

_threads = 1


def set_threads(n: int | None) -> None:
    """Worker threads used for per-candidate scoring (results do not depend on it)."""
    global _threads
    _threads = max(1, int(n or os.cpu_count() or 1))


def _map(fn: Callable[[int], float], items: Sequence[int]) -> list[float]:
    if _threads <= 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=_threads) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class DetectionConfig:
    regime: str = "cpe"
    k: int = 3
    alpha: float = 0.5
    q: int = 2
    beta: float = 0.05
    combination: str = "single"
    semantics: tuple[str, ...] = ()

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.q < 1:
            raise ValueError("q must be positive")
        if self.combination not in COMBINATIONS:
            raise ValueError(f"combination must be one of {COMBINATIONS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["semantics"] = list(self.semantics)
        return d


@dataclass(frozen=True)
class Member:
    index: int
    iteration: int
    p_value: float
    per_semantic: tuple[float, ...]


@dataclass
class Module:
    members: list[Member]
    k: int
    regime: str
    semantic_labels: list[str]
    weights: list[list[float]] = field(default_factory=list)
    pivot_state: PivotState | None = None

    @property
    def indices(self) -> list[int]:
        return [m.index for m in self.members]

    def value(self) -> float:
        """Module valuation: sum of ``-ln p`` at inclusion."""
        return module_value([m.p_value for m in self.members])


def module_value(p_values: Sequence[float]) -> float:
    return float(sum(-math.log(max(p, P_FLOOR)) for p in p_values))


def _matrices(semantics) -> tuple[list[np.ndarray], list[str]]:
    if isinstance(semantics, (MaterializedChain, np.ndarray)):
        semantics = [semantics]
    mats, labels = [], []
    for j, s in enumerate(semantics):
        if isinstance(s, MaterializedChain):
            mats.append(s.values)
            labels.append(s.semantic_label)
        else:
            mats.append(np.asarray(s, dtype=np.float64))
            labels.append(f"semantic{j}")
    if not mats:
        raise ValueError("at least one semantic is required")
    n = mats[0].shape[0]
    if any(m.shape[0] != n for m in mats):
        raise ValueError("all semantics must share the candidate index space")
    return mats, labels


def _argmin(pool: Sequence[int], scores: Sequence[float]) -> int:
    best = min(range(len(pool)), key=lambda j: (scores[j], pool[j]))
    return best


def _rank_of(target: int, indices: Sequence[int], scores: Sequence[float]) -> int:
    """1-based rank of ``target`` by ascending score, ties by index."""
    pos = list(indices).index(target)
    s = scores[pos]
    return 1 + sum(1 for j, v in zip(indices, scores) if v < s or (v == s and j < target))


# ---------------------------------------------------------------------------
# Combination weights


def cpe_semantic_weights(
    mats: Sequence[np.ndarray], state: PivotState, pool: Sequence[int], q: int
) -> list[float]:
    """Weights proportional to mean reciprocal rank of held-out original pivots."""
    d = len(mats)
    if d == 1:
        return [1.0]
    if len(state.original) < 2:
        logger.info("fewer than two pivots: uniform semantic weights")
        return [1.0 / d] * d
    mrr = []
    for C in mats:
        rr = []
        for s in state.original:
            held = state.without(s)
            cands = sorted(set(pool) | {s})
            scores = _map(lambda i: p_cpe(C, held, i, q).p_value, cands)
            rr.append(1.0 / _rank_of(s, cands, scores))
        mrr.append(float(np.mean(rr)))
    total = sum(mrr)
    return [v / total for v in mrr]


def cpi_semantic_weights(mats: Sequence[np.ndarray], pivot_columns: Sequence[int]) -> list[float]:
    """Weights proportional to ``exp(-mean pairwise KL)`` of pivot column profiles."""
    d = len(mats)
    if d == 1:
        return [1.0]
    cols = list(pivot_columns)
    if len(cols) < 2:
        logger.info("single pivot column: uniform semantic weights")
        return [1.0 / d] * d
    raw = []
    for C in mats:
        kls = [kl_divergence(C[:, a], C[:, b]) for a in cols for b in cols if a != b]
        raw.append(math.exp(-float(np.mean(kls))))
    total = sum(raw)
    return [v / total for v in raw]


def combine_scores(per_semantic: Sequence[Sequence[float]], weights: Sequence[float]) -> list[float]:
    """Affine combination of per-semantic p values (lower is better)."""
    arr = np.asarray(per_semantic, dtype=np.float64)
    return list(np.asarray(weights, dtype=np.float64) @ arr)


def combine_scores_cpe(per_semantic, mats, state: PivotState, pool, q: int):
    weights = cpe_semantic_weights(mats, state, pool, q)
    return combine_scores(per_semantic, weights), weights


def combine_scores_cpi(per_semantic, mats, pivot_columns):
    weights = cpi_semantic_weights(mats, pivot_columns)
    return combine_scores(per_semantic, weights), weights


# ---------------------------------------------------------------------------
# CPE


def _check_combination(config: DetectionConfig, d: int):
    if config.combination == "single" and d != 1:
        raise ValueError("combination='single' needs exactly one semantic; use 'combined'")


def detect_cpe(semantics, pivots: Sequence[int], config: DetectionConfig) -> Module:
    mats, labels = _matrices(semantics)
    _check_combination(config, len(mats))
    n = mats[0].shape[0]
    state = PivotState(tuple(pivots), config.alpha)
    if any(not 0 <= p < n for p in state.original):
        raise ValueError("pivot index out of range")
    pool = [i for i in range(n) if i not in set(state.original)]
    module = Module([], config.k, "cpe", labels, pivot_state=state)
    if config.k == 0:
        return module
    if not pool:
        raise ValueError("empty candidate pool")
    for r in range(1, min(config.k, len(pool)) + 1):
        per = [_map(lambda i, C=C: p_cpe(C, state, i, config.q).p_value, pool) for C in mats]
        if len(mats) > 1:
            combined, weights = combine_scores_cpe(per, mats, state, pool, config.q)
        else:
            combined, weights = per[0], [1.0]
        j = _argmin(pool, combined)
        chosen = pool.pop(j)
        module.members.append(Member(chosen, r, float(combined[j]), tuple(float(p[j]) for p in per)))
        module.weights.append([float(w) for w in weights])
        state.accrete(chosen, r)
    return module


# ---------------------------------------------------------------------------
# CPI


def visibility_decay(i: int, history: Sequence[int], beta: float, C: np.ndarray) -> float:
    """``1 - sum_t beta**t exp(-KL(C_i, C_{x_{t-1}}))``, floored at 0."""
    total = 0.0
    for t, x in enumerate(history, start=1):
        total += beta**t * math.exp(-kl_divergence(C[i], C[x]))
    return max(1.0 - total, 0.0)


def detect_cpi(semantics, pivot_columns: Sequence[int], config: DetectionConfig) -> Module:
    mats, labels = _matrices(semantics)
    _check_combination(config, len(mats))
    cols = [int(c) for c in pivot_columns]
    if not cols:
        raise ValueError("pivot set must not be empty")
    for C in mats:
        if any(not 0 <= c < C.shape[1] for c in cols):
            raise ValueError("pivot column out of range")
    n = mats[0].shape[0]
    pool = list(range(n))
    module = Module([], config.k, "cpi", labels)
    if config.k == 0:
        return module
    weights = cpi_semantic_weights(mats, cols)
    history: list[int] = []
    for r in range(1, min(config.k, n) + 1):
        per = []
        for C in mats:
            def score(i, C=C):
                decay = visibility_decay(i, history, config.beta, C)
                return p_cpi(C, cols, i, decay).p_value
            per.append(_map(score, pool))
        combined = combine_scores(per, weights) if len(mats) > 1 else per[0]
        j = _argmin(pool, combined)
        chosen = pool.pop(j)
        module.members.append(Member(chosen, r, float(combined[j]), tuple(float(p[j]) for p in per)))
        module.weights.append([float(w) for w in weights])
        history.append(chosen)
    return module


def detect(semantics, pivots: Sequence[int], config: DetectionConfig) -> Module:
    if config.regime == "cpe":
        return detect_cpe(semantics, pivots, config)
    return detect_cpi(semantics, pivots, config)
