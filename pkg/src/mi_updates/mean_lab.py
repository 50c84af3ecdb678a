"""Exact laboratory for membership inference on a mean-estimation "model".

The learner outputs the sample mean of its data. f_0 is the mean of D_0 and
f_1 the mean of D_0 ∪ D_1, or, for the gradient-step variants, one full-batch
gradient step away from f_0. All densities are handled in log space.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from typing import Iterable, Sequence

import numpy as np

from .data import rng_for
from .learners import Strategy

OUT = 0
IN = 1


@dataclasses.dataclass(frozen=True, eq=False)
class MeanWorld:
    """Spherical Gaussian N(mu, sigma^2 I) with an initial and an update set size."""

    d: int
    n0: int
    n1: int
    sigma: float = 1.0
    mu: np.ndarray | float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.n1 < 1 or self.n0 < 0:
            raise ValueError("need d >= 1, n1 >= 1, n0 >= 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        mu = np.broadcast_to(np.asarray(self.mu, dtype=np.float64), (self.d,)).copy()
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)

    @property
    def n(self) -> int:
        return self.n0 + self.n1

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.mu + self.sigma * rng.standard_normal((size, self.d))


@dataclasses.dataclass(frozen=True)
class MeanEstimates:
    mu0: np.ndarray
    mu1: np.ndarray
    mu_delta: np.ndarray


def sample_mean(points) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 0:
        raise ValueError("mean of an empty set")
    return points.mean(axis=0)


def recover_update_mean(mu0, mu1, n0: int, n1: int) -> np.ndarray:
    """Mean of D_1 from the means of D_0 and D_0 ∪ D_1."""
    n = n0 + n1
    return (n / n1) * np.asarray(mu1) - (n0 / n1) * np.asarray(mu0)


def estimates(d0, d1) -> MeanEstimates:
    d1 = np.atleast_2d(d1)
    n0, n1 = len(d0), len(d1)
    mu0 = sample_mean(d0) if n0 else np.zeros(d1.shape[1])
    mu1 = sample_mean(np.concatenate([np.atleast_2d(d0).reshape(-1, d1.shape[1]), d1]))
    return MeanEstimates(mu0, mu1, recover_update_mean(mu0, mu1, n0, n1))


def np_log_densities(v, mu_hat, mu, sigma: float, d: int, n: int) -> tuple[float, float]:
    """log p_IN and log p_OUT of the estimate ``mu_hat`` for candidate ``v``.

    p_IN  = ((n-1) / (2 pi sigma^2))^(d/2) exp(-(n-1)/(2 sigma^2) ||mu_hat - (n-1)/n mu - v/n||^2)
    p_OUT = (n / (2 pi sigma^2))^(d/2)     exp(-n/(2 sigma^2) ||mu_hat - mu||^2)
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    v, mu_hat, mu = (np.asarray(a, dtype=np.float64) for a in (v, mu_hat, mu))
    if not v.shape == mu_hat.shape == np.broadcast_shapes(mu.shape, v.shape) == (d,):
        raise ValueError(f"all vectors must have dimension {d}")
    s2 = sigma * sigma
    with np.errstate(divide="ignore"):
        log_in = 0.5 * d * np.log((n - 1) / (2 * np.pi * s2)) \
            - (n - 1) / (2 * s2) * float(np.sum((mu_hat - (n - 1) / n * mu - v / n) ** 2))
    log_out = 0.5 * d * math.log(n / (2 * math.pi * s2)) - n / (2 * s2) * float(np.sum((mu_hat - mu) ** 2))
    return float(log_in), float(log_out)


def np_no_update(v, mu_hat, mu, sigma: float, d: int, n: int) -> int:
    """Neyman-Pearson test on a single released mean: IN iff p_IN > p_OUT."""
    log_in, log_out = np_log_densities(v, mu_hat, mu, sigma, d, n)
    return IN if log_in > log_out else OUT


def np_with_update(v, est: MeanEstimates, mu, sigma: float, d: int, n0: int, n1: int) -> int:
    """Same test applied to the recovered update-set mean with n = n1."""
    if n1 < 1:
        raise ValueError("n1 must be at least 1")
    mu_delta = recover_update_mean(est.mu0, est.mu1, n0, n1)
    return np_no_update(v, mu_delta, mu, sigma, d, n1)


def dot_attack(v, mu_delta, mu, n1: int) -> int:
    """IN iff (mu_delta - mu)·(v - mu) >= ||v - mu||^2 / (2 n1)."""
    if n1 < 1:
        raise ValueError("n1 must be at least 1")
    v, mu_delta, mu = (np.asarray(a, dtype=np.float64) for a in (v, mu_delta, mu))
    centred = v - mu
    s = float(np.dot(mu_delta - mu, centred))
    t = float(np.dot(centred, centred)) / (2 * n1)
    return IN if s >= t else OUT


def normal_cdf(z: float) -> float:
    """Standard normal CDF through ``math.erfc`` (absolute error well below 1e-7)."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def bound_no_update(d: int, n: int) -> float:
    """Upper bound on any attacker that only sees the final mean, capped at 1."""
    if n < 2:
        raise ValueError("n must be at least 2")
    return min(1.0, 0.5 + 0.5 * (math.sqrt(5 * d / (n - 1)) + math.sqrt(d) / (n - 1)))


def bound_update(d: int, n1: int) -> float:
    """Accuracy guaranteed for the dot-product attack with both means."""
    if n1 < 2:
        raise ValueError("n1 must be at least 2")
    return normal_cdf(math.sqrt(d / (80 * (n1 - 1))))


def l2sq_loss(x, f) -> float:
    diff = np.asarray(f, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return float(np.dot(diff, diff))


def l2_loss(x, f) -> float:
    return math.sqrt(l2sq_loss(x, f))


def grad_step_mean(f0, d1, d0, lr: float, strategy: Strategy | str = Strategy.SGD_NEW,
                   loss: str = "l2sq") -> np.ndarray:
    """One full-batch gradient step from f0 on the squared or plain L2 loss.

    SGD-New averages the gradient over D_1; SGD-Full over D_0 ∪ D_1.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    d1 = np.atleast_2d(np.asarray(d1, dtype=np.float64))
    if d1.shape[0] == 0:
        raise ValueError("empty update set")
    if Strategy(strategy) is Strategy.SGD_FULL:
        data = np.concatenate([np.atleast_2d(np.asarray(d0, dtype=np.float64)).reshape(-1, f0.size), d1])
    else:
        data = d1
    diff = f0 - data
    if loss == "l2sq":
        grad = 2.0 * diff.mean(axis=0)
    elif loss == "l2":
        norms = np.linalg.norm(diff, axis=1, keepdims=True)
        grad = (diff / np.where(norms > 0, norms, 1.0)).mean(axis=0)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return f0 - lr * grad


# ---------------------------------------------------------------------------
# Monte-Carlo experiments


@dataclasses.dataclass(frozen=True)
class AccuracyRow:
    n1: int
    attack: str
    trials: int
    accuracy: float
    stderr: float


def _row(n1: int, attack: str, trials: int, correct: int, total: int) -> AccuracyRow:
    acc = correct / total
    return AccuracyRow(n1, attack, trials, acc, math.sqrt(acc * (1 - acc) / total))


def mean_attack_trial(world: MeanWorld, rng: np.random.Generator) -> dict[str, int]:
    """One world with one IN and one OUT challenge; returns correct counts per attack."""
    d0 = world.draw(rng, world.n0)
    d1 = world.draw(rng, world.n1)
    est = estimates(d0, d1)
    challenges = ((d1[rng.integers(world.n1)], IN), (world.draw(rng, 1)[0], OUT))
    correct = {"no_update": 0, "update": 0, "dot_update": 0}
    for v, b in challenges:
        correct["no_update"] += int(np_no_update(v, est.mu1, world.mu, world.sigma, world.d, world.n) == b)
        correct["update"] += int(np_with_update(v, est, world.mu, world.sigma, world.d, world.n0, world.n1) == b)
        correct["dot_update"] += int(dot_attack(v, est.mu_delta, world.mu, world.n1) == b)
    return correct


def run_mean_experiment(n1_grid: Iterable[int], trials: int, n0: int = 200, d: int = 250,
                        sigma: float = 0.1, mu: float = 0.0, seed: int = 0,
                        attacks: Sequence[str] = ("no_update", "update", "dot_update")) -> list[AccuracyRow]:
    """Accuracy of the mean-estimation attacks over a grid of update sizes.

    Every trial draws a fresh world and challenges it with one member of
    D_1 and one fresh point, so each accuracy averages 2 * trials decisions.
    Trial t at update size n1 uses the stream ``rng_for(seed, n1, t)``.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    rows = []
    for n1 in n1_grid:
        world = MeanWorld(d, n0, n1, sigma, mu, seed)
        totals = dict.fromkeys(attacks, 0)
        for t in range(trials):
            correct = mean_attack_trial(world, rng_for(seed, n1, t))
            for name in attacks:
                totals[name] += correct[name]
        rows += [_row(n1, name, trials, totals[name], 2 * trials) for name in attacks]
    return rows


def rows_to_csv(rows: Sequence[AccuracyRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n1", "attack", "trials", "accuracy", "stderr"])
    for r in rows:
        writer.writerow([r.n1, r.attack, r.trials, f"{r.accuracy:.6f}", f"{r.stderr:.6f}"])
    return buf.getvalue()


def no_update_accuracy(d: int, n: int, trials: int, sigma: float = 1.0, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo accuracy and stderr of the Neyman-Pearson test on one mean of n points."""
    world = MeanWorld(d, n - 1, 1, sigma, 0.0, seed)
    correct = 0
    for t in range(trials):
        rng = rng_for(seed, t)
        data = world.draw(rng, n)
        mu_hat = data.mean(axis=0)
        correct += np_no_update(data[0], mu_hat, world.mu, sigma, d, n) == IN
        correct += np_no_update(world.draw(rng, 1)[0], mu_hat, world.mu, sigma, d, n) == OUT
    acc = correct / (2 * trials)
    return acc, math.sqrt(acc * (1 - acc) / (2 * trials))


def dot_attack_accuracy(d: int, n1: int, trials: int, n0: int = 200, sigma: float = 1.0,
                        seed: int = 0) -> tuple[float, float]:
    world = MeanWorld(d, n0, n1, sigma, 0.0, seed)
    correct = 0
    for t in range(trials):
        correct += mean_attack_trial(world, rng_for(seed, t))["dot_update"]
    acc = correct / (2 * trials)
    return acc, math.sqrt(acc * (1 - acc) / (2 * trials))


def _scorediff_statistics(world: MeanWorld, lr: float, strategy: Strategy, rng: np.random.Generator):
    """ScoreDiff minus the adversary-computable ||f1 - f0||^2 term, for an IN and an OUT point."""
    d0 = world.draw(rng, world.n0)
    d1 = world.draw(rng, world.n1)
    f0 = sample_mean(d0)
    f1 = grad_step_mean(f0, d1, d0, lr, strategy)
    shift = l2sq_loss(f1, f0)
    out = []
    for v in (d1[rng.integers(world.n1)], world.draw(rng, 1)[0]):
        out.append(l2sq_loss(v, f1) - l2sq_loss(v, f0) - shift)
    return out


def scorediff_theorem_check(d: int, n1: int, n0: int, lr: float, trials: int, sigma: float = 1.0,
                            strategy: Strategy | str = Strategy.SGD_NEW, seed: int = 0,
                            calibration_trials: int | None = None) -> float:
    """Monte-Carlo accuracy of ScoreDiff on one-step mean updates.

    The threshold is the midpoint between the mean IN and mean OUT statistic
    over ``calibration_trials`` independent worlds (default: ``trials``); the
    accuracy is then measured on ``trials`` fresh worlds, each with one IN
    and one OUT challenge. A point is called IN iff its statistic is below
    the threshold.
    """
    strategy = Strategy(strategy)
    world = MeanWorld(d, n0, n1, sigma, 0.0, seed)
    cal = calibration_trials if calibration_trials is not None else trials
    stats = np.array([_scorediff_statistics(world, lr, strategy, rng_for(seed, 0, t)) for t in range(cal)])
    threshold = 0.5 * (stats[:, 0].mean() + stats[:, 1].mean())
    correct = 0
    for t in range(trials):
        s_in, s_out = _scorediff_statistics(world, lr, strategy, rng_for(seed, 1, t))
        correct += int(s_in < threshold) + int(not s_out < threshold)
    return correct / (2 * trials)
