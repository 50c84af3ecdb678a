"""Desk-scale softmax classifiers trained with minibatch SGD or DP-SGD.

Two architectures are supported through one parameter layout: multinomial
logistic regression (no hidden layers) and a ReLU multilayer perceptron.
Models are immutable; every training op returns a new Model.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .data import Dataset, concat, derive_seed


class TrainingError(RuntimeError):
    """Non-finite loss or gradient encountered during training."""


@dataclasses.dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.num_classes < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"invalid architecture {self}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden, self.num_classes]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    @classmethod
    def logistic(cls, input_dim: int, num_classes: int) -> Architecture:
        return cls(input_dim, (), num_classes)


@dataclasses.dataclass(frozen=True, eq=False)
class Model:
    """Layers ``(W_i, b_i)`` with ``W_i`` of shape (fan_out, fan_in).

    Hidden layers use ReLU; the output layer feeds a softmax over K classes.
    """

    arch: Architecture
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        shapes = self.arch.layer_shapes
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError("layer count does not match architecture")
        ws, bs = [], []
        for (fan_out, fan_in), w, b in zip(shapes, self.weights, self.biases):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ValueError(f"layer shapes {w.shape}, {b.shape} do not chain as {(fan_out, fan_in)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise TrainingError("model parameters are not finite")
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def with_params(self, params: Sequence[np.ndarray]) -> Model:
        return Model(self.arch, tuple(params[0::2]), tuple(params[1::2]))

    def equals(self, other: Model) -> bool:
        return self.arch == other.arch and np.array_equal(self.flat(), other.flat())

    def logits(self, x: np.ndarray) -> np.ndarray:
        return _forward(self, _as_batch(self, x))[-1]


def init_model(arch: Architecture, seed: int = 0) -> Model:
    """Zeros for logistic regression; U(-1/sqrt(fan_in), 1/sqrt(fan_in)) otherwise."""
    shapes = arch.layer_shapes
    if not arch.hidden:
        (fan_out, fan_in), = shapes
        return Model(arch, (np.zeros((fan_out, fan_in)),), (np.zeros(fan_out),))
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_out, fan_in in shapes:
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        bs.append(rng.uniform(-bound, bound, fan_out))
    return Model(arch, tuple(ws), tuple(bs))


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    batch_size: int
    epochs: int
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def reseeded(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self, seed=seed)


@dataclasses.dataclass(frozen=True)
class DPConfig:
    clip_norm: float
    noise_multiplier: float
    delta: float = 1e-4

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be nonnegative")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


class Strategy(enum.Enum):
    SGD_NEW = "sgd_new"
    SGD_FULL = "sgd_full"


@dataclasses.dataclass(frozen=True)
class UpdateStrategy:
    kind: Strategy
    config: TrainConfig
    dp: DPConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Strategy(self.kind))


@dataclasses.dataclass
class UpdateTrace:
    """Models f_0..f_k with the datasets D_0..D_k that produced them."""

    initial_set: Dataset
    models: list[Model]
    update_sets: list[Dataset] = dataclasses.field(default_factory=list)
    strategies: list[UpdateStrategy] = dataclasses.field(default_factory=list)

    def __post_init__(self):
        if len(self.models) != len(self.update_sets) + 1:
            raise ValueError("trace must hold exactly one more model than update sets")
        if len({m.arch for m in self.models}) != 1:
            raise ValueError("all models in a trace must share an architecture")

    @property
    def k(self) -> int:
        return len(self.update_sets)

    @property
    def final(self) -> Model:
        return self.models[-1]


# ---------------------------------------------------------------------------
# Forward / backward


def _as_batch(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise ValueError(f"input dimension {x.shape[-1]} does not match model input {model.arch.input_dim}")
    return x


def _forward(model: Model, x: np.ndarray) -> list[np.ndarray]:
    """Returns the list of layer inputs followed by the output logits."""
    acts = [x]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ w.T + b
        acts.append(z if i == last else np.maximum(z, 0.0))
    return acts


def _check_labels(model: Model, y, n: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (n,):
        raise ValueError(f"{n} inputs but {y.size} labels")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    return y


def _backward(model: Model, acts: list[np.ndarray], y: np.ndarray):
    """Per-layer (input activation, output delta) pairs for per-example losses.

    The per-example gradient of layer i is ``outer(delta_i, a_i)`` for the
    weights and ``delta_i`` for the bias.
    """
    n = len(y)
    delta = softmax(acts[-1], axis=1)
    delta[np.arange(n), y] -= 1.0
    pairs = []
    for i in range(len(model.weights) - 1, -1, -1):
        a = acts[i]
        pairs.append((a, delta))
        if i:
            delta = (delta @ model.weights[i]) * (a > 0)
    pairs.reverse()
    return pairs


def _mean_grads(pairs, weights=None) -> list[np.ndarray]:
    n = len(pairs[0][0])
    grads = []
    for a, delta in pairs:
        if weights is not None:
            delta = delta * weights[:, None]
        grads += [delta.T @ a / n, delta.sum(axis=0) / n]
    return grads


def predict_proba(model: Model, x) -> np.ndarray:
    """Softmax class probabilities; a 1-D input returns a 1-D vector."""
    single = np.ndim(x) == 1
    p = softmax(model.logits(x), axis=1)
    return p[0] if single else p


def predict(model: Model, x) -> np.ndarray:
    return np.argmax(model.logits(x), axis=1)


def loss(model: Model, x, y) -> np.ndarray | float:
    """Cross-entropy ``-log p_y(x)``; scalar for a single point."""
    single = np.ndim(x) == 1
    logits = model.logits(x)
    y = _check_labels(model, y, len(logits))
    out = -log_softmax(logits, axis=1)[np.arange(len(y)), y]
    out = np.maximum(out, 0.0)
    return float(out[0]) if single else out


def gradient(model: Model, x, y) -> list[np.ndarray]:
    """Mean cross-entropy gradient over the batch, in ``Model.params()`` order."""
    x = _as_batch(model, x)
    y = _check_labels(model, y, len(x))
    return _mean_grads(_backward(model, _forward(model, x), y))


def sgd_step(model: Model, x, y, learning_rate: float) -> Model:
    """One step ``theta - eta * mean_i grad loss(x_i, y_i)``."""
    x = _as_batch(model, x)
    if len(x) == 0:
        raise ValueError("empty batch")
    grads = gradient(model, x, y)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingError("non-finite gradient")
    return model.with_params([p - learning_rate * g for p, g in zip(model.params(), grads)])


def per_example_grad_norms(model: Model, x, y) -> np.ndarray:
    x = _as_batch(model, x)
    y = _check_labels(model, y, len(x))
    sq = np.zeros(len(x))
    for a, delta in _backward(model, _forward(model, x), y):
        d2 = np.einsum("ij,ij->i", delta, delta)
        sq += d2 * (np.einsum("ij,ij->i", a, a) + 1.0)
    return np.sqrt(sq)


def dp_sgd_step(model: Model, x, y, learning_rate: float, dp: DPConfig,
                rng: np.random.Generator | int, debug: bool = False) -> Model:
    """One DP-SGD step.

    Per-example gradients are clipped to L2 norm ``dp.clip_norm``, summed,
    perturbed with N(0, (noise_multiplier * clip_norm)^2 I), divided by the
    batch size and applied with ``learning_rate``.
    """
    x = _as_batch(model, x)
    y = _check_labels(model, y, len(x))
    if len(x) == 0:
        raise ValueError("empty batch")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    pairs = _backward(model, _forward(model, x), y)
    sq = np.zeros(len(x))
    for a, delta in pairs:
        sq += np.einsum("ij,ij->i", delta, delta) * (np.einsum("ij,ij->i", a, a) + 1.0)
    norms = np.sqrt(sq)
    if not np.all(np.isfinite(norms)):
        raise TrainingError("non-finite per-example gradient")
    scale = np.minimum(1.0, dp.clip_norm / np.maximum(norms, 1e-300))
    if debug:
        assert np.all(norms * scale <= dp.clip_norm * (1 + 1e-12))
    n = len(x)
    # _mean_grads divides by n, so this is the clipped sum over n.
    clipped_sum = [g * n for g in _mean_grads(pairs, scale)]
    sd = dp.noise_multiplier * dp.clip_norm
    params = []
    for p, g in zip(model.params(), clipped_sum):
        noisy = g + sd * rng.standard_normal(g.shape) if sd > 0 else g
        params.append(p - learning_rate * noisy / n)
    return model.with_params(params)


def train(model: Model, data: Dataset, config: TrainConfig, dp: DPConfig | None = None) -> Model:
    """Minibatch (DP-)SGD from ``model`` for ``config.epochs`` epochs.

    The data are reshuffled every epoch from ``config.seed``; the final short
    batch is kept.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.dim != model.arch.input_dim:
        raise ValueError(f"data dimension {data.dim} does not match model input {model.arch.input_dim}")
    rng = np.random.default_rng(config.seed)
    noise_rng = np.random.default_rng(derive_seed(config.seed, 1))
    x, y = data.features, data.labels
    n, bs = len(data), config.batch_size
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for batch_no, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            try:
                if dp is None:
                    model = sgd_step(model, x[idx], y[idx], config.learning_rate)
                else:
                    model = dp_sgd_step(model, x[idx], y[idx], config.learning_rate, dp, noise_rng)
            except TrainingError as err:
                raise TrainingError(f"{err} at epoch {epoch}, batch {batch_no}") from None
    return model


def train_initial(arch: Architecture, config: TrainConfig, d0: Dataset, dp: DPConfig | None = None) -> Model:
    """f_0 = A_train(D_0), starting from the seed-derived initialization."""
    if d0.dim != arch.input_dim or d0.num_classes > arch.num_classes:
        raise ValueError("architecture does not match the initial dataset")
    return train(init_model(arch, derive_seed(config.seed, 0)), d0, config, dp)


def update_model(trace: UpdateTrace, new_set: Dataset, strategy: UpdateStrategy) -> Model:
    """Produces f_i from f_{i-1} and appends it (and D_i) to the trace.

    SGD-New trains on D_i only; SGD-Full trains on D_0 ∪ ... ∪ D_i.
    """
    if len(new_set) == 0:
        raise ValueError("empty update set")
    prev = trace.final
    if new_set.dim != prev.arch.input_dim:
        raise ValueError(f"update set dimension {new_set.dim} does not match model input {prev.arch.input_dim}")
    if strategy.kind is Strategy.SGD_NEW:
        data = new_set
    else:
        data = concat([trace.initial_set, *trace.update_sets, new_set])
    model = train(prev, data, strategy.config, strategy.dp)
    trace.models.append(model)
    trace.update_sets.append(new_set)
    trace.strategies.append(strategy)
    return model


def generate_updates(arch: Architecture, initial: TrainConfig, d0: Dataset,
                     update_sets: Sequence[Dataset], strategy: UpdateStrategy,
                     initial_model: Model | None = None) -> UpdateTrace:
    """Trains f_0 on D_0 and then f_1..f_k on the given update sets.

    Update ``i`` reseeds the strategy's config with ``derive_seed(seed, i)`` so
    consecutive updates do not replay the same shuffle.
    """
    f0 = initial_model if initial_model is not None else train_initial(arch, initial, d0)
    trace = UpdateTrace(d0, [f0])
    for i, d in enumerate(update_sets, start=1):
        step = dataclasses.replace(strategy, config=strategy.config.reseeded(derive_seed(strategy.config.seed, i)))
        update_model(trace, d, step)
    return trace


def accuracy(model: Model, data: Dataset) -> float:
    return float(np.mean(predict(model, data.features) == data.labels))


def model_to_dict(model: Model) -> dict:
    """JSON-ready checkpoint: architecture plus row-major layer parameters."""
    return {
        "format": "mi_updates.model/1",
        "arch": {"input_dim": model.arch.input_dim, "hidden": list(model.arch.hidden),
                 "num_classes": model.arch.num_classes},
        "layers": [
            {"shape": list(w.shape), "weights": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
    }


def model_from_dict(obj: dict) -> Model:
    arch = Architecture(obj["arch"]["input_dim"], tuple(obj["arch"]["hidden"]), obj["arch"]["num_classes"])
    ws = [np.array(layer["weights"], dtype=np.float64).reshape(layer["shape"]) for layer in obj["layers"]]
    bs = [np.array(layer["bias"], dtype=np.float64) for layer in obj["layers"]]
    return Model(arch, tuple(ws), tuple(bs))


def save_model(model: Model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text()))
