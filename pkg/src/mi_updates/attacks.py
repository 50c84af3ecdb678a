"""Score combiners, threshold calibration and multi-update attacks.

A combined score is compared against a threshold with a strict rule: the
point is called IN iff ``combined < T``. Ties resolve to OUT everywhere.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
import math
from typing import Sequence

import numpy as np

from .learners import Model, UpdateTrace
from .scores import ScoreFunction, ShadowSet

DEFAULT_DAMPING = 1e-6
OUT = 0
IN = 1


class CombineMethod(enum.Enum):
    DIFF = "diff"
    RATIO = "ratio"


@dataclasses.dataclass(frozen=True)
class Combiner:
    method: CombineMethod = CombineMethod.DIFF
    damping: float = DEFAULT_DAMPING

    def __post_init__(self):
        object.__setattr__(self, "method", CombineMethod(self.method))
        if self.method is CombineMethod.RATIO and not self.damping > 0:
            raise ValueError("ScoreRatio requires a positive damping constant")

    @property
    def name(self) -> str:
        return self.method.value

    def __call__(self, before, after):
        """Combines the score on the earlier model with the score on the later one."""
        before = np.asarray(before, dtype=np.float64)
        after = np.asarray(after, dtype=np.float64)
        if self.method is CombineMethod.DIFF:
            out = after - before
        else:
            out = (after + self.damping) / (before + self.damping)
        return out if out.ndim else float(out)


def score_diff(x, y, f0: Model, f1: Model, score: ScoreFunction, stages=(0, 1)):
    """score(f1) - score(f0)."""
    return Combiner(CombineMethod.DIFF)(score(f0, x, y, stage=stages[0]), score(f1, x, y, stage=stages[1]))


def score_ratio(x, y, f0: Model, f1: Model, score: ScoreFunction, c: float = DEFAULT_DAMPING, stages=(0, 1)):
    """(score(f1) + c) / (score(f0) + c)."""
    if not c > 0:
        raise ValueError("damping constant c must be positive")
    return Combiner(CombineMethod.RATIO, c)(score(f0, x, y, stage=stages[0]), score(f1, x, y, stage=stages[1]))


def combined_scores(x, y, f_before: Model, f_after: Model, score: ScoreFunction,
                    combiner: Combiner, stages=(0, 1)):
    return combiner(score(f_before, x, y, stage=stages[0]), score(f_after, x, y, stage=stages[1]))


# ---------------------------------------------------------------------------
# Thresholds


class ThresholdMode(enum.Enum):
    ACCURACY = "accuracy"
    PRECISION = "precision"


_MODE_QUANTILE = {ThresholdMode.ACCURACY: 0.5, ThresholdMode.PRECISION: 0.1}


def quantile(values, q: float) -> float:
    """Sorted-order linear interpolation (Hyndman-Fan type 7)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot take a quantile of an empty list")
    return float(np.quantile(values, q, method="linear"))


def calibrate_batch(combined, mode: ThresholdMode | str = ThresholdMode.ACCURACY) -> float:
    """Median (accuracy) or 10th percentile (precision) of a mixed IN/OUT batch."""
    return quantile(combined, _MODE_QUANTILE[ThresholdMode(mode)])


def calibrate_rank(out_scores, q: float) -> float:
    """q-quantile of OUT-only combined scores; the false-positive rate is about q."""
    if not 0 < q < 1:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    return quantile(out_scores, q)


def calibrate_transfer(shadows: ShadowSet, combiner: Combiner, score: ScoreFunction,
                       mode: ThresholdMode | str = ThresholdMode.ACCURACY, shadow_index: int = 0,
                       stages=(0, 1)) -> float:
    """Batch threshold computed on a shadow (pre, post) pair over its own pool."""
    if not shadows.traces or len(shadows.traces[shadow_index]) < 2:
        raise ValueError("transfer calibration needs a pre- and post-update shadow model")
    trace = shadows.traces[shadow_index]
    pool = shadows.pool
    values = combined_scores(pool.features, pool.labels, trace[stages[0]], trace[stages[1]],
                             score, combiner, stages)
    return calibrate_batch(values, mode)


def decide(combined, threshold: float):
    """IN (1) iff combined < threshold."""
    out = (np.asarray(combined) < threshold).astype(np.int64)
    return out if out.ndim else int(out)


# ---------------------------------------------------------------------------
# Multi-update attacks


def back_front(x, y, trace: UpdateTrace, combiner: Combiner, score: ScoreFunction, threshold: float):
    """Single-update attack applied to the first and last model of the trace."""
    if trace.k < 1:
        raise ValueError("trace holds no updates")
    values = combined_scores(x, y, trace.models[0], trace.models[-1], score, combiner, (0, trace.k))
    return decide(values, threshold)


def pairwise_scores(x, y, trace: UpdateTrace, combiner: Combiner, score: ScoreFunction) -> np.ndarray:
    """Combined score of every point on every adjacent pair; shape (k, n)."""
    per_model = [np.atleast_1d(score(f, x, y, stage=i)) for i, f in enumerate(trace.models)]
    return np.stack([np.atleast_1d(combiner(per_model[i - 1], per_model[i])) for i in range(1, len(per_model))])


def delta_thresholds(batch_combined, n_up: int) -> list[float]:
    """Sequential per-epoch thresholds for the Delta attack.

    ``batch_combined`` has shape (k, N): row i-1 holds the combined score of
    every calibration point on (f_{i-1}, f_i). For i = 1..k in order, T_i is
    the midpoint between the n_up-th and (n_up+1)-th smallest scores among the
    points not yet assigned, so exactly n_up of them fall strictly below it;
    those points are then removed from later rounds.
    """
    values = np.atleast_2d(np.asarray(batch_combined, dtype=np.float64))
    k, n = values.shape
    if n_up < 1:
        raise ValueError("n_up must be positive")
    if n < k * n_up + 1:
        raise ValueError(f"{n} calibration points cannot fill {k} epochs of {n_up}")
    remaining = np.arange(n)
    thresholds = []
    for i in range(k):
        vals = values[i, remaining]
        ordered = np.sort(vals)
        t = 0.5 * (ordered[n_up - 1] + ordered[n_up])
        thresholds.append(float(t))
        remaining = remaining[~(vals < t)]
    return thresholds


@dataclasses.dataclass(frozen=True)
class MultiUpdateDecision:
    verdict: int
    epoch: int | None = None

    def __post_init__(self):
        if (self.verdict == IN) != (self.epoch is not None):
            raise ValueError("an epoch index is present iff the verdict is IN")


def delta_decisions(pair_scores, thresholds: Sequence[float]) -> np.ndarray:
    """Vectorized Delta scan: first epoch i with score_i < T_i, or 0 for OUT."""
    pair_scores = np.atleast_2d(np.asarray(pair_scores, dtype=np.float64))
    if pair_scores.shape[0] != len(thresholds):
        raise ValueError(f"{len(thresholds)} thresholds for {pair_scores.shape[0]} updates")
    hits = pair_scores < np.asarray(thresholds, dtype=np.float64)[:, None]
    first = np.argmax(hits, axis=0) + 1
    return np.where(hits.any(axis=0), first, 0)


def delta_attack(x, y, trace: UpdateTrace, combiner: Combiner, score: ScoreFunction,
                 thresholds: Sequence[float]) -> MultiUpdateDecision:
    if len(thresholds) != trace.k:
        raise ValueError(f"{len(thresholds)} thresholds for a trace of {trace.k} updates")
    epoch = int(delta_decisions(pairwise_scores(x, y, trace, combiner, score), thresholds)[0])
    return MultiUpdateDecision(IN, epoch) if epoch else MultiUpdateDecision(OUT)


# ---------------------------------------------------------------------------
# 0/1-loss analysis


@dataclasses.dataclass(frozen=True)
class ZeroOneTable:
    """Cell masses (f_0 correct?, f_1 correct?) for update (u) and test (t) points.

    ``u11`` is the fraction of update points that both models classify
    correctly, ``u10`` those f_0 gets right and f_1 wrong, and so on.
    """

    u11: float
    u10: float
    u01: float
    u00: float
    t11: float
    t10: float
    t01: float
    t00: float

    def __post_init__(self):
        for group in (self.update, self.test):
            if any(p < 0 for p in group) or not math.isclose(math.fsum(group), 1.0, abs_tol=1e-9):
                raise ValueError(f"invalid probability table {self}")

    @property
    def update(self) -> tuple[float, float, float, float]:
        return (self.u11, self.u10, self.u01, self.u00)

    @property
    def test(self) -> tuple[float, float, float, float]:
        return (self.t11, self.t10, self.t01, self.t00)

    def satisfies_assumptions(self, tol: float = 1e-12) -> bool:
        same_f0 = abs((self.u11 + self.u10) - (self.t11 + self.t10)) <= tol
        improves = self.u11 > self.t11 and self.u01 > self.t01
        return same_f0 and improves


_CELLS = ("11", "10", "01", "00")


def optimal_01_attack(table: ZeroOneTable, with_updates: bool) -> tuple[dict[str, int], float]:
    """Exhaustively finds the best decision per observable 0/1 cell.

    With updates the adversary sees both correctness bits (four cells);
    without it only sees f_1's bit, so cells sharing it must share a
    decision. Returns the decision map keyed by cell ("11", "10", "01", "00")
    and the accuracy on a balanced update/test mix.
    """
    u = dict(zip(_CELLS, table.update))
    t = dict(zip(_CELLS, table.test))
    if with_updates:
        groups = [[c] for c in _CELLS]
    else:
        groups = [["11", "01"], ["10", "00"]]
    best_map, best_terms, best_acc = None, None, -1.0
    for choice in itertools.product((OUT, IN), repeat=len(groups)):
        terms = []
        for group, verdict in zip(groups, choice):
            terms += [u[c] if verdict == IN else t[c] for c in group]
        acc = 0.5 * math.fsum(terms)
        if acc > best_acc:
            best_acc, best_terms = acc, terms
            best_map = {c: verdict for group, verdict in zip(groups, choice) for c in group}
    return best_map, 0.5 * math.fsum(best_terms)
