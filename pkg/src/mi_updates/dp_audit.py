"""Privacy accounting for DP-SGD updates and empirical epsilon auditing.

The accountant composes the Renyi DP of the Poisson-subsampled Gaussian
mechanism over a fixed grid of orders and converts to (epsilon, delta). It is
an upper bound on the privacy loss. The audit turns the precision of a
membership attack into a lower bound: an (epsilon, delta)-DP update cannot be
attacked with precision above e^eps / (1 + e^eps), so a Clopper-Pearson lower
confidence bound p on the precision certifies epsilon >= ln(p / (1 - p)).
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np
from scipy import special, stats

from .experiment import AttackSpec, DPPhaseConfig, ExperimentConfig, run_experiment

DEFAULT_DELTA = 1e-4
DEFAULT_CONFIDENCE = 0.98
ORDERS = tuple(1.0 + 0.25 * i for i in range(1, 253))  # 1.25, 1.5, ..., 64


@dataclasses.dataclass(frozen=True)
class AccountantInput:
    noise_multiplier: float
    steps: int
    sampling_rate: float = 1.0
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be a positive integer")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError("sampling_rate must lie in (0, 1]")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


def _log_add(a: float, b: float) -> float:
    return np.logaddexp(a, b)


def _log_sub(a: float, b: float) -> float:
    """log(exp(a) - exp(b)) for a >= b."""
    if b == -math.inf:
        return a
    if a <= b:
        return -math.inf
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    return math.log(2.0) + float(special.log_ndtr(-x * math.sqrt(2.0)))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    log_a = -math.inf
    for i in range(alpha + 1):
        term = (math.log(special.binom(alpha, i)) + i * math.log(q) + (alpha - i) * math.log1p(-q)
                + (i * i - i) / (2 * sigma ** 2))
        log_a = _log_add(log_a, term)
    return float(log_a)


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    log_a0 = log_a1 = -math.inf
    z0 = sigma ** 2 * math.log(1 / q - 1) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2 * sigma ** 2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma ** 2) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30:
            break
    return float(_log_add(log_a0, log_a1))


def rdp_per_step(q: float, sigma: float, alpha: float) -> float:
    """RDP of one step of the sampled Gaussian mechanism at order alpha."""
    if sigma == 0:
        return math.inf
    if q == 1.0:
        return alpha / (2 * sigma ** 2)
    if float(alpha).is_integer():
        return _log_a_int(q, sigma, int(alpha)) / (alpha - 1)
    return _log_a_frac(q, sigma, alpha) / (alpha - 1)


def rdp_epsilon(inp: AccountantInput, orders: Sequence[float] = ORDERS) -> float:
    """(epsilon, delta) upper bound: min over orders of steps * rdp + log(1/delta) / (alpha - 1).

    Returns ``math.inf`` when the noise multiplier is zero.
    """
    if inp.noise_multiplier == 0:
        return math.inf
    best = math.inf
    for alpha in orders:
        eps = inp.steps * rdp_per_step(inp.sampling_rate, inp.noise_multiplier, alpha) \
            + math.log(1 / inp.delta) / (alpha - 1)
        best = min(best, eps)
    return max(best, 0.0)


def clopper_pearson(successes: int, trials: int, confidence: float = DEFAULT_CONFIDENCE) -> tuple[float, float]:
    """Exact two-sided binomial interval; each tail holds (1 - confidence) / 2."""
    if not (isinstance(successes, (int, np.integer)) and isinstance(trials, (int, np.integer))):
        raise TypeError("successes and trials must be integers")
    if trials < 1 or not 0 <= successes <= trials:
        raise ValueError(f"invalid counts: {successes} successes in {trials} trials")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    tail = (1 - confidence) / 2
    lower = 0.0 if successes == 0 else float(stats.beta.ppf(tail, successes, trials - successes + 1))
    upper = 1.0 if successes == trials else float(stats.beta.ppf(1 - tail, successes + 1, trials - successes))
    return lower, upper


def epsilon_lower_bound(precision_lower: float) -> float:
    """max(0, ln(p / (1 - p))); infinite at p = 1."""
    if not 0 <= precision_lower <= 1:
        raise ValueError("precision must lie in [0, 1]")
    if precision_lower == 1:
        return math.inf
    if precision_lower <= 0.5:
        return 0.0
    return math.log(precision_lower / (1 - precision_lower))


@dataclasses.dataclass(frozen=True)
class AuditResult:
    sigma: float
    steps: int
    q: float
    delta: float
    epsilon: float
    successes: int
    trials: int
    confidence: float
    precision_lower: float
    epsilon_lower: float

    def __post_init__(self):
        if self.trials and self.precision_lower > self.successes / self.trials + 1e-12:
            raise ValueError("precision lower bound exceeds the empirical precision")
        if self.epsilon_lower < 0:
            raise ValueError("epsilon lower bound must be nonnegative")

    @property
    def precision(self) -> float | None:
        return self.successes / self.trials if self.trials else None

    @property
    def sound(self) -> bool:
        return self.epsilon_lower <= self.epsilon

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("epsilon", "epsilon_lower"):
            if math.isinf(out[key]):
                out[key] = "inf"
        out["precision"] = self.precision
        return out


@dataclasses.dataclass(frozen=True)
class AuditConfig:
    """A DP update experiment evaluated at several noise multipliers.

    ``experiment`` fixes the data, learner and challenge protocol; each grid
    point replaces its ``learner.dp`` with (clip_norm, sigma, delta) and uses
    ``attack`` (default: ScoreDiff on the loss with a precision-mode Batch
    threshold).
    """

    experiment: ExperimentConfig
    sigmas: tuple[float, ...]
    clip_norm: float = 1.0
    delta: float = DEFAULT_DELTA
    confidence: float = DEFAULT_CONFIDENCE
    attack: AttackSpec = AttackSpec("scorediff_precision", mode="precision")

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if not self.sigmas:
            raise ValueError("the audit grid needs at least one noise multiplier")
        if any(s < 0 for s in self.sigmas):
            raise ValueError("noise multipliers must be nonnegative")
        if self.experiment.k != 1:
            raise ValueError("audits run on single-update experiments")

    def grid_config(self, sigma: float) -> ExperimentConfig:
        learner = dataclasses.replace(self.experiment.learner,
                                      dp=DPPhaseConfig(self.clip_norm, sigma, self.delta))
        return dataclasses.replace(self.experiment, learner=learner, attacks=(self.attack,))

    def accountant_input(self, sigma: float) -> AccountantInput:
        """Privacy cost of one update: all update epochs over n_up points.

        Minibatches are formed by shuffling, so q = batch / n_up is exact
        only for full-batch updates (q = 1), the default audit setting.
        """
        phase = self.experiment.learner.update_phase
        n = self.experiment.n_up
        if self.experiment.learner.strategy != "sgd_new":
            # SGD-Full touches D_0 too; the update points still see every epoch.
            n = self.experiment.n0 + n
        batch = min(phase.batch_size, n)
        steps = phase.epochs * math.ceil(n / batch)
        return AccountantInput(max(sigma, 0.0), steps, batch / n, self.delta)


def audit_point(config: AuditConfig, sigma: float, workers: int = 1) -> tuple[AuditResult, list]:
    result = run_experiment(config.grid_config(sigma), workers=workers)
    report = result.reports[config.attack.name]
    acc_in = config.accountant_input(sigma)
    eps = rdp_epsilon(acc_in)
    trials = report.tp + report.fp
    lower = clopper_pearson(report.tp, trials, config.confidence)[0] if trials else 0.0
    audit = AuditResult(sigma, acc_in.steps, acc_in.sampling_rate, config.delta, eps, report.tp, trials,
                        config.confidence, lower, epsilon_lower_bound(lower))
    return audit, result.records


def run_audit(config: AuditConfig, workers: int = 1) -> list[AuditResult]:
    """One AuditResult per noise multiplier, in grid order."""
    return [audit_point(config, s, workers)[0] for s in config.sigmas]
