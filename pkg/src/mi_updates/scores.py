"""Per-example membership scores and shadow-model construction.

Every score is oriented so that a LOWER value means "more member-like".
Score functions are called as ``score(model, x, y, stage=...)`` and accept a
single point or a batch; ``stage`` names the position of ``model`` in an
update trace (0 for f_0, i for f_i) and only matters for LiRA.
"""

from __future__ import annotations

import dataclasses
import functools
from typing import Protocol

import numpy as np

from . import learners
from .data import Dataset, derive_seed
from .learners import Architecture, Model, TrainConfig, UpdateStrategy

STD_FLOOR = 1e-8
TRANSFORMS = ("loss", "logit")


def transform_loss(loss, transform: str = "loss"):
    """Maps cross-entropy to the scale on which LiRA fits its Gaussians.

    "loss" is the identity. "logit" is the negated logit of the true-class
    confidence p = exp(-loss), i.e. log((1 - p) / p) = log(expm1(loss)),
    which is far closer to Gaussian for confidently classified points.
    Both are increasing in the loss, so lower stays more member-like.
    """
    if transform == "loss":
        return loss
    if transform == "logit":
        loss = np.maximum(np.asarray(loss, dtype=np.float64), 1e-300)
        out = np.where(loss > 30, loss + np.log1p(-np.exp(-loss)), np.log(np.expm1(np.minimum(loss, 30))))
        return out if out.ndim else float(out)
    raise ValueError(f"unknown LiRA transform {transform!r}")


class ScoreFunction(Protocol):
    name: str

    def __call__(self, model: Model, x, y, stage: int = 0) -> np.ndarray | float: ...


def loss_score(x, y, f: Model) -> np.ndarray | float:
    return learners.loss(f, x, y)


def gap_score(x, y, f: Model) -> np.ndarray | float:
    """0 for correctly classified points, 1 otherwise."""
    single = np.ndim(x) == 1
    wrong = (learners.predict(f, x) != np.atleast_1d(y)).astype(np.float64)
    return float(wrong[0]) if single else wrong


@dataclasses.dataclass(frozen=True)
class LossScore:
    name: str = "loss"

    def __call__(self, model, x, y, stage=0):
        return loss_score(x, y, model)


@dataclasses.dataclass(frozen=True)
class GapScore:
    name: str = "gap"

    def __call__(self, model, x, y, stage=0):
        return gap_score(x, y, model)


class MissingShadowError(ValueError):
    """The queried point has too few OUT shadows for a LiRA estimate."""


@dataclasses.dataclass(frozen=True, eq=False)
class ShadowSet:
    """Shadow update traces trained on random halves of an attacker pool.

    Attributes:
      pool: the candidate points the shadows were built around.
      traces: per shadow, the models (f̂_0, ..., f̂_k) of its update trace.
      members: bool array (m, len(pool)); True where the point was in the
        shadow's update set.
      out_mean, out_std: arrays (k + 1, len(pool)) of the OUT-loss mean and
        (floored) standard deviation for each trace stage.
      out_count: array (k + 1, len(pool)) of how many OUT shadows contributed.
      losses: optional array (k + 1, m, len(pool)) of raw shadow losses, from
        which statistics on other transform scales are derived.
    """

    pool: Dataset
    traces: tuple[tuple[Model, ...], ...]
    members: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    out_count: np.ndarray
    losses: np.ndarray | None = None

    @property
    def m(self) -> int:
        return len(self.traces)

    @functools.cached_property
    def _lookup(self) -> dict:
        return {(row.tobytes(), int(label)): i
                for i, (row, label) in enumerate(zip(self.pool.features, self.pool.labels))}

    @functools.cached_property
    def _stats(self) -> dict:
        return {"loss": (self.out_mean, self.out_std)}

    def statistics(self, transform: str = "loss") -> tuple[np.ndarray, np.ndarray]:
        """OUT mean and std per (stage, point) on the given transform scale."""
        if transform not in self._stats:
            if self.losses is None:
                raise ValueError(f"shadow set keeps no raw losses for the {transform!r} transform")
            mean, std, _ = _out_moments(transform_loss(self.losses, transform), self.members)
            self._stats[transform] = (mean, std)
        return self._stats[transform]

    def index_of(self, x, y) -> np.ndarray:
        """Pool row index for each query point; raises for unknown points."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_1d(y)
        out = np.empty(len(x), dtype=np.int64)
        for i, (row, label) in enumerate(zip(x, y)):
            try:
                out[i] = self._lookup[(row.tobytes(), int(label))]
            except KeyError:
                raise MissingShadowError("query point is not in the shadow pool") from None
        return out


def fit_out_statistics(pool: Dataset, traces, members: np.ndarray):
    """Per-example OUT-loss mean/std for every trace stage.

    Stage 0 models never see pool points, so every shadow counts as OUT
    there; later stages use only shadows whose update set excluded the point.
    """
    stages = len(traces[0])
    losses = np.array([[learners.loss(t[s], pool.features, pool.labels) for t in traces] for s in range(stages)])
    return _out_moments(losses, members)


def _out_moments(losses: np.ndarray, members: np.ndarray):
    stages = losses.shape[0]
    out_mask = np.ones((stages,) + members.shape, dtype=bool)
    out_mask[1:] = ~members[None]
    count = out_mask.sum(axis=1)
    safe = np.maximum(count, 1)
    mean = np.where(out_mask, losses, 0.0).sum(axis=1) / safe
    var = np.where(out_mask, (losses - mean[:, None, :]) ** 2, 0.0).sum(axis=1) / np.maximum(count - 1, 1)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return mean, std, count


def train_shadows(pool: Dataset, m: int, arch: Architecture, initial: TrainConfig,
                  strategy: UpdateStrategy, base: Dataset, seed: int,
                  base_size: int | None = None, n_updates: int = 1) -> ShadowSet:
    """Trains ``m`` shadow update traces.

    Memberships are balanced: every pool point is IN for exactly ``m // 2``
    shadows, so each point keeps ``m - m // 2`` OUT shadows (a single shadow
    takes a random half of the pool instead). For shadow j,
    f̂_0 is trained on a random ``base_size`` subset of the attacker's
    ``base`` data (half of it by default); its IN points (about half the
    pool) are split into ``n_updates`` update sets producing f̂_1..f̂_k.
    """
    if m < 1:
        raise ValueError("need at least one shadow model")
    if len(pool) < 2 * n_updates:
        raise ValueError(f"pool of {len(pool)} points is too small for {n_updates} updates")
    base_size = base_size if base_size is not None else len(base) // 2
    if not 1 <= base_size <= len(base):
        raise ValueError("base_size must be between 1 and len(base)")
    split_rng = np.random.default_rng(derive_seed(seed))
    if m == 1:
        members = np.zeros((1, len(pool)), dtype=bool)
        members[0, split_rng.permutation(len(pool))[:len(pool) // 2]] = True
    else:
        members = split_rng.random((m, len(pool))).argsort(axis=0) < m // 2
    traces = []
    for j in range(m):
        rng = np.random.default_rng(derive_seed(seed, j))
        base_idx = rng.choice(len(base), size=base_size, replace=False)
        in_idx = rng.permutation(np.flatnonzero(members[j]))
        if len(in_idx) < n_updates:
            # Possible only for tiny pools; top up from the shadow's OUT points.
            extra = rng.permutation(np.flatnonzero(~members[j]))[:n_updates - len(in_idx)]
            members[j, extra] = True
            in_idx = np.concatenate([in_idx, extra])
        chunks = np.array_split(in_idx, n_updates)
        cfg = initial.reseeded(derive_seed(seed, j, 1))
        upd = dataclasses.replace(strategy, config=strategy.config.reseeded(derive_seed(seed, j, 2)))
        trace = learners.generate_updates(arch, cfg, base.subset(base_idx),
                                          [pool.subset(c) for c in chunks], upd)
        traces.append(tuple(trace.models))
    losses = np.array([[learners.loss(t[s], pool.features, pool.labels) for t in traces]
                       for s in range(len(traces[0]))])
    mean, std, count = _out_moments(losses, members)
    return ShadowSet(pool, tuple(traces), members, mean, std, count, losses)


def lira_score(x, y, f: Model, shadows: ShadowSet, stage: int = 1, min_out: int = 2,
               transform: str = "loss") -> np.ndarray | float:
    """Offline LiRA z-score ``(t(loss) - mu_out) / s_out``; lower is more member-like.

    ``t`` is ``transform_loss(., transform)`` and the OUT moments are fitted
    on the same scale.
    """
    single = np.ndim(x) == 1
    if shadows.m < 2:
        raise MissingShadowError("LiRA scoring needs at least two shadow models")
    idx = shadows.index_of(x, y)
    if stage < 0 or stage >= shadows.out_mean.shape[0]:
        raise ValueError(f"shadows have no stage {stage}")
    if np.any(shadows.out_count[stage, idx] < min_out):
        raise MissingShadowError(f"fewer than {min_out} OUT shadows for a query point at stage {stage}")
    mean, std = shadows.statistics(transform)
    t = transform_loss(np.atleast_1d(learners.loss(f, x, y)), transform)
    z = (t - mean[stage, idx]) / std[stage, idx]
    return float(z[0]) if single else z


@dataclasses.dataclass(frozen=True)
class LiraScore:
    shadows: ShadowSet
    transform: str = "loss"
    name: str = "lira"

    def __call__(self, model, x, y, stage=1):
        return lira_score(x, y, model, self.shadows, stage=min(stage, self.shadows.out_mean.shape[0] - 1),
                          transform=self.transform)


def shadow_set_to_dict(shadows: ShadowSet) -> dict:
    """JSON-ready form: split flags, fitted statistics and shadow checkpoints."""
    return {
        "format": "mi_updates.shadows/1",
        "members": shadows.members.astype(int).tolist(),
        "out_mean": shadows.out_mean.tolist(),
        "out_std": shadows.out_std.tolist(),
        "out_count": shadows.out_count.tolist(),
        "losses": None if shadows.losses is None else shadows.losses.tolist(),
        "traces": [[learners.model_to_dict(f) for f in trace] for trace in shadows.traces],
    }


def shadow_set_from_dict(obj: dict, pool: Dataset) -> ShadowSet:
    return ShadowSet(
        pool,
        tuple(tuple(learners.model_from_dict(f) for f in trace) for trace in obj["traces"]),
        np.array(obj["members"], dtype=bool),
        np.array(obj["out_mean"]),
        np.array(obj["out_std"]),
        np.array(obj["out_count"]),
        None if obj.get("losses") is None else np.array(obj["losses"]),
    )
