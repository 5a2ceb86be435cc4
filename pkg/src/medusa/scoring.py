"""Significance of candidates against pivots on a materialized chain.

Binomial coefficients are extended to real arguments through the gamma
function and evaluated in log space.  The concentration density (same-type
pivots) and the visibility density (cross-type pivots) are products of three
such coefficients, integrated numerically with a fixed-panel Simpson rule.

Scoring works on the *count scale* of a row-stochastic matrix: rows are
multiplied by the number of columns, so every row carries mass ``m`` and the
average entry is 1.  On this scale the uniform row has top-``q`` mass exactly
``q`` and no row can see more than ``m`` in total.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln

logger = logging.getLogger(__name__)

SIMPSON_PANELS = 256
KL_EPSILON = 1e-12


class ScoringError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# Real-line binomial coefficients


def log_gbin(n, k):
    """``log(Gamma(n+1) / (Gamma(k+1) Gamma(n-k+1)))``, ``-inf`` off-domain.

    The domain requires ``n+1``, ``k+1`` and ``n-k+1`` to be positive; outside
    it the coefficient contributes zero density instead of a pole.
    """
    n = np.asarray(n, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    a, b, c = n + 1.0, k + 1.0, n - k + 1.0
    ok = (a > 0) & (b > 0) & (c > 0)
    with np.errstate(all="ignore"):
        val = gammaln(np.where(ok, a, 1.0)) - gammaln(np.where(ok, b, 1.0)) - gammaln(np.where(ok, c, 1.0))
    out = np.where(ok, val, -np.inf)
    return out if out.ndim else float(out)


def gbin(n, k):
    """Binomial coefficient on the real line (0 outside the domain)."""
    out = np.exp(log_gbin(n, k))
    return out if np.ndim(out) else float(out)


def simpson(f, a: float, b: float, panels: int = SIMPSON_PANELS) -> float:
    """Composite Simpson rule with a fixed, even number of panels."""
    if panels % 2:
        raise ValueError("panels must be even")
    if a == b:
        return 0.0
    x = np.linspace(a, b, panels + 1)
    y = np.asarray(f(x), dtype=np.float64)
    h = (b - a) / panels
    return float(h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum()))


# ---------------------------------------------------------------------------
# Pivots


@dataclass
class PivotState:
    """Original pivots plus members accreted during greedy growth.

    Original pivots weigh 1; a member accreted at (1-based) iteration ``r``
    weighs ``(1 - alpha) ** r``.
    """

    original: tuple[int, ...]
    alpha: float = 0.5
    accreted: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.original = tuple(int(i) for i in self.original)
        if not self.original:
            raise ValueError("pivot set must not be empty")
        if len(set(self.original)) != len(self.original):
            raise ValueError("duplicate pivots")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")

    def accrete(self, index: int, iteration: int) -> None:
        if index in self.original or any(index == j for j, _ in self.accreted):
            raise ValueError(f"index {index} is already a pivot")
        self.accreted.append((int(index), int(iteration)))

    def members(self) -> np.ndarray:
        return np.array(list(self.original) + [j for j, _ in self.accreted], dtype=np.int64)

    def weights(self) -> np.ndarray:
        """Weights aligned with :meth:`members`."""
        acc = [(1.0 - self.alpha) ** r for _, r in self.accreted]
        return np.array([1.0] * len(self.original) + acc)

    def weight_vector(self, n: int) -> np.ndarray:
        w = np.zeros(n)
        w[self.members()] = self.weights()
        return w

    def without(self, index: int) -> "PivotState":
        """Copy with original pivot ``index`` removed (for leave-one-out)."""
        return PivotState(
            tuple(i for i in self.original if i != index), self.alpha, list(self.accreted)
        )

    def copy(self) -> "PivotState":
        return PivotState(self.original, self.alpha, list(self.accreted))


@dataclass(frozen=True)
class CandidateScore:
    index: int
    p_value: float
    observed: float
    top_columns: tuple[int, ...] = ()


def count_scale(C: np.ndarray) -> np.ndarray:
    return np.asarray(C, dtype=np.float64) * C.shape[1]


def top_q(C: np.ndarray, i: int, q: int) -> np.ndarray:
    """Columns of the ``q`` largest entries of row ``i``; ties by column index."""
    row = np.asarray(C)[i]
    if not 1 <= q <= row.shape[0]:
        raise ValueError(f"q must lie in [1, {row.shape[0]}], got {q}")
    order = np.lexsort((np.arange(row.shape[0]), -row))
    return np.sort(order[:q])


# ---------------------------------------------------------------------------
# Same-type pivots: concentration


def cpe_masses(C: np.ndarray, pivots: PivotState, Q: Sequence[int]) -> tuple[float, float]:
    """Pivot-weighted mass on ``Q`` and total mass of the original pivots."""
    C = np.asarray(C)
    Q = np.asarray(Q, dtype=np.int64)
    rows = pivots.members()
    on_q = C[np.ix_(rows, Q)].sum(axis=1)
    weighted = float(on_q @ pivots.weights())
    total = float(C[list(pivots.original)].sum())
    return weighted, total


def h_cpe(c, C: np.ndarray, pivots: PivotState, Q: Sequence[int], i: int):
    """Concentration density of candidate ``i`` at strength ``c``."""
    A, B = cpe_masses(C, pivots, Q)
    row_total = float(np.asarray(C)[i].sum())
    return _density(c, A, B, row_total)


def _density(c, A: float, B: float, row_total: float):
    c = np.asarray(c, dtype=np.float64)
    log_h = log_gbin(A, c) + log_gbin(B - A, row_total - c) - log_gbin(B, row_total)
    with np.errstate(invalid="ignore"):
        out = np.where(np.isfinite(log_h), np.exp(log_h), 0.0)
    return out if out.ndim else float(out)


def _require_finite(i: int, what: str, *values: float) -> None:
    if not all(math.isfinite(v) for v in values):
        raise ScoringError(f"non-finite {what} integrand for candidate {i}")


def p_cpe(C: np.ndarray, pivots: PivotState, i: int, q: int) -> CandidateScore:
    """Cumulative probability of the observed or any weaker concentration.

    ``C`` is row-stochastic; lower values mark better candidates.  The
    density is integrated over ``[0, c~]`` on the count scale, where ``c~``
    is the candidate's mass on its own top-``q`` columns.  The density's
    centre follows the pivots' mass on those columns, so the tail is small
    when the pivots concentrate there more heavily than the candidate does
    by chance.
    """
    X = count_scale(C)
    Q = top_q(X, i, q)
    observed = float(X[i, Q].sum())
    A, B = cpe_masses(X, pivots, Q)
    row_total = float(X[i].sum())
    _require_finite(i, "concentration", A, B, row_total, observed)
    p = simpson(lambda c: _density(c, A, B, row_total), 0.0, observed)
    if not math.isfinite(p):
        raise ScoringError(f"non-finite concentration integral for candidate {i}")
    return CandidateScore(int(i), min(max(p, 0.0), 1.0), observed, tuple(int(x) for x in Q))


# ---------------------------------------------------------------------------
# Cross-type pivots: visibility


def cpi_masses(C: np.ndarray, pivot_columns: Sequence[int]) -> tuple[float, float]:
    C = np.asarray(C)
    return float(C[:, list(pivot_columns)].sum()), float(C.sum())


def h_cpi(c, C: np.ndarray, pivot_columns: Sequence[int], i: int):
    """Visibility density of candidate ``i`` at strength ``c``."""
    A, total = cpi_masses(C, pivot_columns)
    row_total = float(np.asarray(C)[i].sum())
    return _density(c, A, total, row_total)


def p_cpi(C: np.ndarray, pivot_columns: Sequence[int], i: int, decay: float = 1.0) -> CandidateScore:
    """Cumulative probability of the observed or any stronger visibility.

    The observed visibility is the candidate's pivot-column mass times
    ``decay``; the integral runs up to the number of columns.
    """
    if not 0 <= decay <= 1:
        raise ValueError("decay must lie in [0, 1]")
    X = count_scale(C)
    cols = list(pivot_columns)
    A, total = cpi_masses(X, cols)
    row_total = float(X[i].sum())
    observed = decay * float(X[i, cols].sum())
    m = X.shape[1]
    _require_finite(i, "visibility", A, total, row_total, observed)
    p = simpson(lambda c: _density(c, A, total, row_total), observed, float(m))
    if not math.isfinite(p):
        raise ScoringError(f"non-finite visibility integral for candidate {i}")
    return CandidateScore(int(i), min(max(p, 0.0), 1.0), observed)


# ---------------------------------------------------------------------------


def kl_divergence(p, q) -> float:
    """``sum p log(p/q)`` after adding 1e-12 to both and renormalizing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must have equal length")
    p = p + KL_EPSILON
    q = q + KL_EPSILON
    p = p / p.sum()
    q = q / q.sum()
    return max(float(np.sum(p * np.log(p / q))), 0.0)
