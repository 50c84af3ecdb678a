"""The membership-inference game with model updates, and its metrics.

An experiment runs several independent *worlds*. A world draws D_0 and the
update sets D_1..D_k, trains the update trace, and then plays a number of
challenge rounds against it: each round samples a hidden (a, b), shows every
configured attack a point from D_a (b = 1) or a fresh point (b = 0), and
logs the attack's answer (â, b̂) as a TrialRecord.

Every world also draws k * n_up fresh OUT points. Together with the update
sets they form the *batch* used by Batch-style calibration, and the OUT
challenges are drawn from them.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Sequence

import numpy as np

from . import attacks as atk
from . import learners
from .data import (Dataset, Distribution, GaussianClasses, MixtureDistribution, MixtureSpec, concat,
                   derive_seed, load_csv, load_dataset, load_idx, rng_for)
from .learners import Architecture, DPConfig, Strategy, TrainConfig, UpdateStrategy
from .scores import TRANSFORMS, GapScore, LiraScore, LossScore, train_shadows

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Experiment configuration failed validation."""


class Instantiation(enum.Enum):
    SINGLE = "single"
    MULTI = "multi"
    SHIFT = "shift"


# ---------------------------------------------------------------------------
# Configuration


def _strict(cls, obj: dict, where: str):
    """Builds dataclass ``cls`` from ``obj``, rejecting unknown keys."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


@dataclasses.dataclass(frozen=True)
class DataConfig:
    """Where samples come from.

    ``kind="gaussian"`` draws class means once from ``data_seed``; ``"idx"``,
    ``"csv"`` and ``"npz"`` sample without replacement from a file-backed
    pool (``path``, plus ``labels_path`` for IDX or ``label_column`` for CSV).
    """

    kind: str = "gaussian"
    num_classes: int = 10
    dim: int = 20
    separation: float = 1.0
    sigma: float = 1.0
    data_seed: int = 0
    path: str | None = None
    labels_path: str | None = None
    label_column: str | None = None
    normalize: bool = True

    def __post_init__(self):
        if self.kind not in ("gaussian", "idx", "csv", "npz"):
            raise ValueError(f"unknown data kind {self.kind!r}")
        if self.kind != "gaussian" and not self.path:
            raise ValueError(f"data kind {self.kind!r} needs a path")


@dataclasses.dataclass(frozen=True)
class ShiftConfig:
    """Subpopulation shift: D_1 = (1 - alpha) source + alpha target.

    ``target="hard"`` redraws every class mean independently (disjoint
    subpopulations); ``"easy"`` perturbs the source means by
    ``nearby_scale * separation`` standard-normal noise.
    """

    alpha: float
    target: str = "hard"
    nearby_scale: float = 0.2

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.target not in ("hard", "easy"):
            raise ValueError("target must be 'hard' or 'easy'")


@dataclasses.dataclass(frozen=True)
class PhaseConfig:
    learning_rate: float
    epochs: int
    batch_size: int = 32


@dataclasses.dataclass(frozen=True)
class DPPhaseConfig:
    clip_norm: float = 0.5
    noise_multiplier: float = 1.0
    delta: float = 1e-4


@dataclasses.dataclass(frozen=True)
class LearnerConfig:
    hidden: tuple[int, ...] = ()
    initial: PhaseConfig = PhaseConfig(0.01, 50)
    strategy: str = "sgd_new"
    update: PhaseConfig | None = None
    dp: DPPhaseConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        Strategy(self.strategy)

    @property
    def update_phase(self) -> PhaseConfig:
        if self.update is not None:
            return self.update
        if Strategy(self.strategy) is Strategy.SGD_NEW:
            return PhaseConfig(0.001, 10, self.initial.batch_size)
        return PhaseConfig(0.01, 10, self.initial.batch_size)


ATTACK_KINDS = ("single", "back_front", "delta", "baseline", "random")
SCORES = ("loss", "lira")
THRESHOLDS = ("batch", "transfer", "rank")
BASELINES = ("gap", "loss", "lira")


@dataclasses.dataclass(frozen=True)
class AttackSpec:
    """One attack to run in every world.

    kind: "single" and "back_front" combine scores on (f_0, f_k); "delta"
      scans adjacent pairs; "baseline" uses only f_k; "random" guesses.
    combiner / damping: ScoreDiff ("diff") or ScoreRatio ("ratio").
    score: "loss" or "lira".
    threshold: "batch", "transfer" or "rank" (delta supports batch only).
    mode: "accuracy" (median) or "precision" (10th percentile) for batch
      and transfer thresholds.
    q: the OUT quantile for rank thresholds.
    baseline: "gap", "loss" or "lira" when kind == "baseline".
    lira_transform: scale of the LiRA Gaussian fit, "loss" or "logit".
    """

    name: str
    kind: str = "single"
    combiner: str = "diff"
    damping: float = atk.DEFAULT_DAMPING
    score: str = "loss"
    threshold: str = "batch"
    mode: str = "accuracy"
    q: float = 0.1
    baseline: str | None = None
    lira_transform: str = "loss"

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"attack {self.name!r}: unknown kind {self.kind!r}")
        atk.Combiner(self.combiner, self.damping)
        if self.score not in SCORES:
            raise ValueError(f"attack {self.name!r}: unknown score {self.score!r}")
        if self.threshold not in THRESHOLDS:
            raise ValueError(f"attack {self.name!r}: unknown threshold {self.threshold!r}")
        atk.ThresholdMode(self.mode)
        if not 0 < self.q < 1:
            raise ValueError(f"attack {self.name!r}: q must lie in (0, 1)")
        if self.kind == "baseline" and self.baseline not in BASELINES:
            raise ValueError(f"attack {self.name!r}: baseline must be one of {BASELINES}")
        if self.lira_transform not in TRANSFORMS:
            raise ValueError(f"attack {self.name!r}: lira_transform must be one of {TRANSFORMS}")
        if self.kind == "delta" and self.threshold != "batch":
            raise ValueError(f"attack {self.name!r}: delta thresholds support batch calibration only")

    @property
    def uses_shadows(self) -> bool:
        if self.kind == "baseline":
            return self.baseline == "lira"
        if self.kind == "random":
            return False
        return self.score == "lira" or self.threshold == "transfer"


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    instantiation: str = "single"
    k: int = 1
    n0: int = 1000
    n_up: int = 10
    data: DataConfig = DataConfig()
    shift: ShiftConfig | None = None
    learner: LearnerConfig = LearnerConfig()
    attacks: tuple[AttackSpec, ...] = ()
    worlds: int = 10
    points_per_world: int | None = None
    challenge: str = "sampled"
    shadows: int = 8
    shadow_base_size: int | None = None
    rank_out_size: int | None = None
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "attacks", tuple(self.attacks))
        inst = Instantiation(self.instantiation)
        if inst is Instantiation.MULTI and self.k < 2:
            raise ValueError("the multi-update instantiation requires k >= 2")
        if inst is not Instantiation.MULTI and self.k != 1:
            raise ValueError(f"the {inst.value} instantiation requires k == 1")
        if inst is Instantiation.SHIFT:
            if self.shift is None:
                raise ValueError("the shift instantiation requires a shift section")
            if self.data.kind != "gaussian":
                raise ValueError("the shift instantiation requires gaussian data")
        if self.n0 < 1 or self.n_up < 1 or self.worlds < 1:
            raise ValueError("n0, n_up and worlds must be positive")
        if self.points_per_world is not None and self.points_per_world < 1:
            raise ValueError("points_per_world must be positive")
        if self.challenge not in ("sampled", "all"):
            raise ValueError("challenge must be 'sampled' or 'all'")
        if not self.attacks:
            raise ValueError("at least one attack is required")
        names = [a.name for a in self.attacks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attack names in {names}")
        if any(a.uses_shadows for a in self.attacks) and self.shadows < 4:
            raise ValueError("LiRA and transfer attacks need at least 4 shadows")
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")

    @property
    def points(self) -> int:
        return self.points_per_world if self.points_per_world is not None else 2 * self.k * self.n_up

    @property
    def trials(self) -> int:
        """Challenge rounds over the whole experiment."""
        return self.worlds * (2 * self.k * self.n_up if self.challenge == "all" else self.points)

    @classmethod
    def from_dict(cls, obj: dict) -> ExperimentConfig:
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        obj = dict(obj)
        if "data" in obj:
            obj["data"] = _strict(DataConfig, obj["data"], "data")
        if obj.get("shift") is not None:
            obj["shift"] = _strict(ShiftConfig, obj["shift"], "shift")
        if "learner" in obj:
            learner = dict(_expect_dict(obj["learner"], "learner"))
            for key, sub in (("initial", PhaseConfig), ("update", PhaseConfig), ("dp", DPPhaseConfig)):
                if learner.get(key) is not None:
                    learner[key] = _strict(sub, learner[key], f"learner.{key}")
            obj["learner"] = _strict(LearnerConfig, learner, "learner")
        if "attacks" in obj:
            if not isinstance(obj["attacks"], list):
                raise ConfigError("attacks: expected a list")
            obj["attacks"] = [_strict(AttackSpec, a, f"attacks[{i}]") for i, a in enumerate(obj["attacks"])]
        return _strict(cls, obj, "config")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


def _expect_dict(obj, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    return obj


# ---------------------------------------------------------------------------
# Records and metrics


@dataclasses.dataclass(frozen=True)
class TrialRecord:
    trial: int
    world: int
    attack: str
    a: int
    b: int
    a_hat: int | None
    b_hat: int
    combined: float | None = None
    scores: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.b not in (0, 1) or self.b_hat not in (0, 1):
            raise ValueError("membership bits must be 0 or 1")
        if self.a < 1:
            raise ValueError("update index a must lie in [k]")

    @property
    def generic_correct(self) -> bool:
        return self.b_hat == self.b

    @property
    def specific_correct(self) -> bool:
        return self.b_hat == self.b and (self.b == 0 or self.a_hat == self.a)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), separators=(",", ":"))


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float | None
    recall: float | None
    generic_accuracy: float
    specific_accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    trials: int
    per_epoch: dict[int, dict[str, int]]
    attack: str = ""
    joint_accuracy: float | None = None

    def __post_init__(self):
        n = self.tp + self.fp + self.tn + self.fn
        if n != self.trials:
            raise ValueError("confusion counts do not add up to trials")
        if not math.isclose(self.accuracy, (self.tp + self.tn) / n, rel_tol=0, abs_tol=1e-15):
            raise ValueError("accuracy inconsistent with confusion counts")
        if self.specific_accuracy > self.generic_accuracy:
            raise ValueError("specific accuracy exceeds generic accuracy")

    @property
    def stderr(self) -> float:
        return math.sqrt(self.accuracy * (1 - self.accuracy) / self.trials)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["per_epoch"] = {str(k): v for k, v in self.per_epoch.items()}
        out["stderr"] = self.stderr
        return out


def compute_metrics(records: Sequence[TrialRecord], attack: str | None = None,
                    k: int | None = None) -> MetricsReport:
    """Aggregates one attack's trial records.

    accuracy = generic accuracy = mean(b̂ == b); specific accuracy also
    requires â == a on members. per_epoch maps each true update index to the
    member counts that were assigned to the right epoch ("hit"), to a wrong
    epoch ("wrong_epoch") or called OUT ("missed").

    With ``k`` given, joint_accuracy is the expected rate of (â == a and
    b̂ == b) when an OUT answer comes with a uniformly guessed epoch, so that
    coin flipping scores 1/(2k).
    """
    if not records:
        raise ValueError("no trial records")
    tp = sum(r.b == 1 and r.b_hat == 1 for r in records)
    fp = sum(r.b == 0 and r.b_hat == 1 for r in records)
    tn = sum(r.b == 0 and r.b_hat == 0 for r in records)
    fn = sum(r.b == 1 and r.b_hat == 0 for r in records)
    n = len(records)
    per_epoch: dict[int, dict[str, int]] = {}
    for r in records:
        if r.b == 1:
            cell = per_epoch.setdefault(r.a, {"hit": 0, "wrong_epoch": 0, "missed": 0})
            if r.b_hat == 0:
                cell["missed"] += 1
            elif r.a_hat == r.a:
                cell["hit"] += 1
            else:
                cell["wrong_epoch"] += 1
    generic = (tp + tn) / n
    joint = None
    if k is not None:
        joint = math.fsum((1.0 if r.a_hat == r.a else 0.0) if r.b == 1 else 1 / k
                          for r in records if r.b_hat == r.b) / n
    return MetricsReport(
        accuracy=generic,
        precision=tp / (tp + fp) if tp + fp else None,
        recall=tp / (tp + fn) if tp + fn else None,
        generic_accuracy=generic,
        specific_accuracy=sum(r.specific_correct for r in records) / n,
        tp=tp, fp=fp, tn=tn, fn=fn, trials=n,
        per_epoch=dict(sorted(per_epoch.items())),
        attack=attack if attack is not None else records[0].attack,
        joint_accuracy=joint,
    )


def baseline_random(k: int) -> float:
    """Specific accuracy of guessing membership and epoch uniformly."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return 1 / (2 * k)


def baseline_generic(p: float, k: int) -> float:
    """Specific accuracy of a generic attack with accuracy p plus a random epoch."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    if k < 1:
        raise ValueError("k must be at least 1")
    return p / k


def no_update_baselines(x, y, f_k: learners.Model, kind: str, calibration: dict[str, Any]):
    """Membership guesses that only look at the final model.

    gap: IN iff the point is classified correctly.
    loss: IN iff its loss is strictly below ``calibration["train_loss"]``.
    lira: IN iff its LiRA score on ``calibration["shadows"]`` is strictly
      below ``calibration["threshold"]`` (at trace stage ``calibration["stage"]``).
    """
    if kind == "gap":
        return atk.decide(GapScore()(f_k, x, y), 0.5)
    if kind == "loss":
        if "train_loss" not in calibration:
            raise ValueError("the loss baseline needs the average training loss")
        return atk.decide(learners.loss(f_k, x, y), calibration["train_loss"])
    if kind == "lira":
        if "shadows" not in calibration or "threshold" not in calibration:
            raise ValueError("the LiRA baseline needs shadows and a threshold")
        score = LiraScore(calibration["shadows"], calibration.get("transform", "loss"))(
            f_k, x, y, stage=calibration.get("stage", 1))
        return atk.decide(score, calibration["threshold"])
    raise ValueError(f"unknown baseline {kind!r}")


# ---------------------------------------------------------------------------
# Worlds


class FilePool:
    """Samples without replacement from a file-backed dataset."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.dim = dataset.dim
        self.num_classes = dataset.num_classes

    def sample(self, n: int, rng: np.random.Generator) -> Dataset:
        if n > len(self.dataset):
            raise ValueError(f"requested {n} points from a pool of {len(self.dataset)}")
        return self.dataset.subset(rng.choice(len(self.dataset), size=n, replace=False))


def build_distributions(config: ExperimentConfig) -> tuple[Distribution, Distribution]:
    """(initial-training distribution, update/test distribution)."""
    dc = config.data
    if dc.kind == "gaussian":
        source = GaussianClasses.random(dc.num_classes, dc.dim, dc.separation, dc.sigma, dc.data_seed, "source")
        if config.shift is None:
            return source, source
        rng = rng_for(dc.data_seed, 1)
        if config.shift.target == "hard":
            means = dc.separation * rng.standard_normal(source.means.shape)
        else:
            means = source.means + config.shift.nearby_scale * dc.separation * rng.standard_normal(source.means.shape)
        target = GaussianClasses(means, dc.sigma, "target")
        return source, MixtureDistribution(MixtureSpec(source, target, config.shift.alpha))
    if dc.kind == "idx":
        ds = load_idx(dc.path, dc.labels_path, normalize=dc.normalize)
    elif dc.kind == "csv":
        ds = load_csv(dc.path, dc.label_column or "label", normalize=dc.normalize)
    else:
        ds = load_dataset(dc.path)
    pool = FilePool(ds)
    return pool, pool


@dataclasses.dataclass
class World:
    trace: learners.UpdateTrace
    out_pool: Dataset
    rank_out: Dataset | None
    shadows: Any = None

    @property
    def candidates(self) -> Dataset:
        return concat([*self.trace.update_sets, self.out_pool])

    @property
    def candidate_epochs(self) -> np.ndarray:
        """Update index of each candidate, 0 for OUT-pool points."""
        sizes = [len(d) for d in self.trace.update_sets]
        return np.concatenate([np.full(s, i + 1) for i, s in enumerate(sizes)] + [np.zeros(len(self.out_pool), int)])


def _strategy(config: ExperimentConfig, seed: int) -> UpdateStrategy:
    lc = config.learner
    phase = lc.update_phase
    dp = DPConfig(**dataclasses.asdict(lc.dp)) if lc.dp is not None else None
    return UpdateStrategy(Strategy(lc.strategy), TrainConfig(phase.learning_rate, phase.batch_size, phase.epochs, seed), dp)


def _initial_config(config: ExperimentConfig, seed: int) -> TrainConfig:
    p = config.learner.initial
    return TrainConfig(p.learning_rate, p.batch_size, p.epochs, seed)


def build_world(config: ExperimentConfig, w: int, distributions=None) -> World:
    source, updates = distributions or build_distributions(config)
    rng = rng_for(config.seed, w, 0)
    k, n_up = config.k, config.n_up
    arch = Architecture(source.dim, config.learner.hidden, source.num_classes)
    if isinstance(source, FilePool):
        rank_n = config.rank_out_size or k * n_up
        total = config.n0 + 2 * k * n_up + rank_n
        drawn = source.sample(total, rng)
        d0 = drawn.subset(slice(0, config.n0))
        sets = [drawn.subset(slice(config.n0 + i * n_up, config.n0 + (i + 1) * n_up)) for i in range(k)]
        start = config.n0 + k * n_up
        out_pool = drawn.subset(slice(start, start + k * n_up))
        rank_out = drawn.subset(slice(start + k * n_up, total))
    else:
        d0 = source.sample(config.n0, rng)
        sets = [updates.sample(n_up, rng) for _ in range(k)]
        out_pool = updates.sample(k * n_up, rng)
        rank_out = updates.sample(config.rank_out_size or k * n_up, rng)
    trace = learners.generate_updates(arch, _initial_config(config, derive_seed(config.seed, w, 1)), d0, sets,
                                      _strategy(config, derive_seed(config.seed, w, 2)))
    world = World(trace, out_pool, rank_out)
    if any(a.uses_shadows for a in config.attacks):
        base_size = config.shadow_base_size or config.n0
        if isinstance(source, FilePool):
            base = source.sample(min(2 * base_size, len(source.dataset)), rng_for(config.seed, w, 3))
        else:
            base = source.sample(2 * base_size, rng_for(config.seed, w, 3))
        world.shadows = train_shadows(world.candidates, config.shadows, arch,
                                      _initial_config(config, 0), _strategy(config, 0), base,
                                      derive_seed(config.seed, w, 4), base_size=base_size, n_updates=k)
    return world


def _score_fn(spec: AttackSpec, world: World):
    return LiraScore(world.shadows, spec.lira_transform) if spec.score == "lira" else LossScore()


def attack_world(spec: AttackSpec, world: World, rng: np.random.Generator):
    """Decisions of one attack on every candidate point of a world.

    Returns (b̂, â, combined, per-model scores) arrays aligned with
    ``world.candidates``; â is 0 where b̂ is OUT.
    """
    trace, cands = world.trace, world.candidates
    x, y, k = cands.features, cands.labels, trace.k
    n = len(cands)
    combined = scores = None
    if spec.kind == "random":
        b_hat = rng.integers(2, size=n)
        a_hat = rng.integers(1, k + 1, size=n)
    elif spec.kind == "baseline":
        f_k = trace.final
        if spec.baseline == "gap":
            b_hat = no_update_baselines(x, y, f_k, "gap", {})
        elif spec.baseline == "loss":
            train = concat([trace.initial_set, *trace.update_sets])
            avg = float(np.mean(learners.loss(f_k, train.features, train.labels)))
            b_hat = no_update_baselines(x, y, f_k, "loss", {"train_loss": avg})
        else:
            values = LiraScore(world.shadows, spec.lira_transform)(f_k, x, y, stage=k)
            threshold = atk.calibrate_batch(values, spec.mode)
            b_hat = atk.decide(values, threshold)
            combined = values
        a_hat = rng.integers(1, k + 1, size=n)
    else:
        score = _score_fn(spec, world)
        combiner = atk.Combiner(spec.combiner, spec.damping)
        per_model = [np.atleast_1d(score(f, x, y, stage=i)) for i, f in enumerate(trace.models)]
        scores = np.stack(per_model, axis=1)
        if spec.kind == "delta":
            pairs = np.stack([combiner(per_model[i - 1], per_model[i]) for i in range(1, k + 1)])
            epochs = atk.delta_decisions(pairs, atk.delta_thresholds(pairs, config_n_up(world)))
            b_hat = (epochs > 0).astype(np.int64)
            a_hat = epochs
            combined = pairs[np.maximum(epochs, 1) - 1, np.arange(n)]
        else:
            combined = combiner(per_model[0], per_model[k])
            threshold = _threshold(spec, world, score, combiner, combined)
            b_hat = atk.decide(combined, threshold)
            a_hat = np.ones(n, dtype=np.int64) if k == 1 else rng.integers(1, k + 1, size=n)
    a_hat = np.where(b_hat == 1, a_hat, 0)
    return b_hat, a_hat, combined, scores


def config_n_up(world: World) -> int:
    return len(world.trace.update_sets[0])


def _threshold(spec: AttackSpec, world: World, score, combiner, batch_combined) -> float:
    k = world.trace.k
    if spec.threshold == "batch":
        return atk.calibrate_batch(batch_combined, spec.mode)
    if spec.threshold == "transfer":
        return atk.calibrate_transfer(world.shadows, combiner, LossScore() if spec.score == "loss" else score,
                                      spec.mode, stages=(0, k))
    ro = world.rank_out
    out_values = atk.combined_scores(ro.features, ro.labels, world.trace.models[0], world.trace.final,
                                     LossScore(), combiner, (0, k)) if spec.score == "loss" else None
    if out_values is None:
        raise ConfigError("rank thresholds with LiRA scores are not supported")
    return atk.calibrate_rank(out_values, spec.q)


def draw_challenges(config: ExperimentConfig, world: World, rng: np.random.Generator):
    """Hidden (a, b) and candidate index for every challenge round of a world."""
    epochs = world.candidate_epochs
    k = config.k
    by_epoch = [np.flatnonzero(epochs == i) for i in range(k + 1)]
    if config.challenge == "all":
        order = rng.permutation(len(epochs))
        a = np.where(epochs[order] > 0, epochs[order], rng.integers(1, k + 1, size=len(order)))
        b = (epochs[order] > 0).astype(np.int64)
        return a, b, order
    m = config.points
    a = rng.integers(1, k + 1, size=m)
    b = rng.integers(2, size=m)
    idx = np.empty(m, dtype=np.int64)
    for j in range(m):
        pool = by_epoch[a[j]] if b[j] else by_epoch[0]
        idx[j] = pool[rng.integers(len(pool))]
    return a, b, idx


def run_world(config: ExperimentConfig, w: int) -> list[TrialRecord]:
    world = build_world(config, w)
    rng = rng_for(config.seed, w, 5)
    a, b, idx = draw_challenges(config, world, rng)
    base_trial = w * len(idx)
    records = []
    for s, spec in enumerate(config.attacks):
        b_hat, a_hat, combined, scores = attack_world(spec, world, rng_for(config.seed, w, 6, s))
        for j, i in enumerate(idx):
            records.append(TrialRecord(
                trial=base_trial + j, world=w, attack=spec.name, a=int(a[j]), b=int(b[j]),
                a_hat=int(a_hat[i]) if b_hat[i] else None, b_hat=int(b_hat[i]),
                combined=None if combined is None else float(combined[i]),
                scores=None if scores is None else tuple(float(v) for v in scores[i]),
            ))
    return records


@dataclasses.dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: dict[str, MetricsReport]
    records: list[TrialRecord]

    @property
    def best(self) -> list[str]:
        """All attacks tied for the highest accuracy."""
        top = max(r.accuracy for r in self.reports.values())
        return [name for name, r in self.reports.items() if r.accuracy == top]

    def summary(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "instantiation": self.config.instantiation,
            "k": self.config.k,
            "trials": self.config.trials,
            "attacks": {name: r.to_dict() for name, r in self.reports.items()},
            "best": self.best,
            "baselines": {"random_specific": baseline_random(self.config.k)},
        }

    def records_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Plays every world of ``config`` and aggregates per-attack metrics.

    Results are ordered by world index, so the output does not depend on
    ``workers``.
    """
    if workers > 1 and config.worlds > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_world = list(pool.map(run_world, [config] * config.worlds, range(config.worlds)))
    else:
        per_world = [run_world(config, w) for w in range(config.worlds)]
    records = [r for recs in per_world for r in recs]
    reports = {spec.name: compute_metrics([r for r in records if r.attack == spec.name], spec.name, config.k)
               for spec in config.attacks}
    return ExperimentResult(config, reports, records)


def binomial_stderr(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n)


def exceeds_by(hi: float, n_hi: int, lo: float, n_lo: int, margin: float = 0.0, z: float = 5.0) -> tuple[bool, float]:
    """Whether hi - lo - margin exceeds z binomial standard errors; returns (verdict, z-statistic)."""
    se = math.sqrt(binomial_stderr(hi, n_hi) ** 2 + binomial_stderr(lo, n_lo) ** 2)
    stat = (hi - lo - margin) / se if se > 0 else (math.inf if hi - lo - margin > 0 else -math.inf)
    return stat > z, stat
