"""Small fully-connected networks in plain numpy.

One engine serves both the pairwise client discriminators and the federated
classifiers. Models are immutable-by-convention values: every operation
returns a new :class:`MlpModel` instead of mutating its argument.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh")
OUTPUT_MODES = ("binary_logistic", "softmax")

PROB_EPS = 1e-12


class TrainingDivergence(FloatingPointError):
    """Raised when activations, losses or gradients stop being finite."""


@dataclass(frozen=True)
class MlpConfig:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    output_mode: str = "softmax"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output mode {self.output_mode!r}")
        if self.output_mode == "binary_logistic" and sizes[-1] != 1:
            raise ValueError("binary_logistic output needs exactly one unit")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[k] * s[k + 1] + s[k + 1] for k in range(len(s) - 1))

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "output_mode": self.output_mode,
        }


@dataclass
class MlpModel:
    """Weights are stored as (fan_in, fan_out) so a forward pass is ``x @ W + b``."""

    config: MlpConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        sizes = self.config.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("number of parameter arrays does not match the config")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
                raise ValueError(
                    f"layer {k}: expected {(sizes[k], sizes[k + 1])}/{(sizes[k + 1],)}, "
                    f"got {w.shape}/{b.shape}"
                )

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> MlpModel:
        return MlpModel(self.config, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> MlpModel:
        cfg = MlpConfig(
            tuple(doc["config"]["layer_sizes"]),
            doc["config"]["activation"],
            doc["config"]["output_mode"],
        )
        sizes = cfg.layer_sizes
        weights = [
            np.asarray(w, dtype=np.float64).reshape(sizes[k], sizes[k + 1])
            for k, w in enumerate(doc["weights"])
        ]
        biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
        model = cls(cfg, weights, biases)
        if not model.is_finite():
            raise ValueError("model parameters must be finite")
        return model

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> MlpModel:
        return cls.from_dict(json.loads(text))


@dataclass
class Batch:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if len(self.features) != len(self.targets):
            raise ValueError(
                f"row mismatch: {len(self.features)} feature rows vs {len(self.targets)} targets"
            )

    def __len__(self):
        return len(self.targets)


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    loss: float = field(default=float("nan"))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def init_model(config: MlpConfig, rng: np.random.Generator | int | None = None) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng)
    sizes = config.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(config, weights, biases)


def zeros_model(config: MlpConfig) -> MlpModel:
    sizes = config.layer_sizes
    return MlpModel(
        config,
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
    )


def sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _check_features(model, features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.config.n_inputs:
        raise ValueError(
            f"expected feature width {model.config.n_inputs}, got shape {np.shape(features)}"
        )
    return x


def _forward_cache(model, x):
    kind = model.config.activation
    zs, acts = [], [x]
    a = x
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        zs.append(z)
        if k < last:
            a = _activate(z, kind)
            acts.append(a)
    return zs, acts


def logits(model: MlpModel, features) -> np.ndarray:
    x = _check_features(model, features)
    zs, _ = _forward_cache(model, x)
    return zs[-1]


def forward(model: MlpModel, features) -> np.ndarray:
    """Predicted probabilities.

    ``binary_logistic`` returns a 1-d vector of P(y=1); ``softmax`` returns an
    (n, k) matrix whose rows sum to one.
    """
    z = logits(model, features)
    if model.config.output_mode == "binary_logistic":
        return sigmoid(z[:, 0])
    return softmax(z)


def predict(model: MlpModel, features) -> np.ndarray:
    probs = forward(model, features)
    if model.config.output_mode == "binary_logistic":
        return (probs >= 0.5).astype(np.int64)
    return probs.argmax(axis=1)


def _output_delta(model, z_out, targets):
    """Loss and dL/dz at the output layer for mean cross-entropy."""
    n = len(z_out)
    if model.config.output_mode == "binary_logistic":
        y = np.asarray(targets, dtype=np.float64).reshape(-1)
        p = sigmoid(z_out[:, 0])
        pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
        loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
        delta = ((p - y) / n)[:, None]
        return loss, delta
    y = np.asarray(targets).reshape(-1).astype(np.int64)
    k = z_out.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"class index out of range for {k} outputs")
    p = softmax(z_out)
    pc = np.clip(p[np.arange(n), y], PROB_EPS, 1.0 - PROB_EPS)
    loss = -np.mean(np.log(pc))
    delta = p.copy()
    delta[np.arange(n), y] -= 1.0
    return loss, delta / n


def backward(model: MlpModel, batch: Batch) -> Gradients:
    """Gradients of the mean cross-entropy over ``batch``."""
    x = _check_features(model, batch.features)
    if len(x) == 0:
        raise ValueError("empty batch")
    zs, acts = _forward_cache(model, x)
    loss, delta = _output_delta(model, zs[-1], batch.targets)
    if not np.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss {loss}")
    kind = model.config.activation
    n_layers = len(model.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k].T) * _activation_grad(zs[k - 1], acts[k], kind)
    grads = Gradients(gw, gb, float(loss))
    if not all(np.all(np.isfinite(g)) for g in grads.params()):
        raise TrainingDivergence("non-finite gradient")
    return grads


def loss(model: MlpModel, batch: Batch) -> float:
    x = _check_features(model, batch.features)
    zs, _ = _forward_cache(model, x)
    value, _ = _output_delta(model, zs[-1], batch.targets)
    return float(value)


def sgd_step(model: MlpModel, grads: Gradients, lr: float) -> MlpModel:
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    return MlpModel(
        model.config,
        [w - lr * g for w, g in zip(model.weights, grads.weights)],
        [b - lr * g for b, g in zip(model.biases, grads.biases)],
    )


def average_models(models, weights) -> MlpModel:
    """Element-wise convex combination of models with identical configs."""
    models = list(models)
    weights = np.asarray(weights, dtype=np.float64)
    if not models:
        raise ValueError("nothing to average")
    if len(weights) != len(models):
        raise ValueError("one weight per model is required")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must be nonnegative and sum to 1, got {weights.sum()!r}")
    cfg = models[0].config
    if any(m.config != cfg for m in models[1:]):
        raise ValueError("cannot average models with different configs")
    if len(models) == 1:
        return models[0].copy()
    n_layers = len(cfg.layer_sizes) - 1
    ws, bs = [], []
    for k in range(n_layers):
        ws.append(sum(a * m.weights[k] for a, m in zip(weights, models)))
        bs.append(sum(a * m.biases[k] for a, m in zip(weights, models)))
    return MlpModel(cfg, ws, bs)


def train_epochs(
    model: MlpModel,
    batch: Batch,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    prox_mu: float = 0.0,
    anchor: MlpModel | None = None,
    min_steps: int = 0,
) -> MlpModel:
    """Minibatch SGD over shuffled epochs.

    Extra epochs are appended until at least ``min_steps`` minibatch steps have
    been taken, so tiny datasets still get a usable number of updates.

    With ``prox_mu > 0`` each step also pulls towards ``anchor`` by
    ``prox_mu * (w - anchor)``, the gradient of ``prox_mu/2 * ||w - anchor||^2``.
    """
    n = len(batch)
    if n == 0 or epochs <= 0:
        return model.copy()
    x = np.asarray(batch.features, dtype=np.float64)
    y = batch.targets
    use_prox = prox_mu > 0.0 and anchor is not None
    anchor_params = anchor.params() if use_prox else None
    per_epoch = -(-n // batch_size)
    epochs = max(epochs, -(-min_steps // per_epoch))
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            grads = backward(model, Batch(x[idx], y[idx]))
            if use_prox:
                params = model.params()
                g = grads.params()
                for k in range(len(g)):
                    g[k] = g[k] + prox_mu * (params[k] - anchor_params[k])
                grads = Gradients(g[0::2], g[1::2], grads.loss)
            model = sgd_step(model, grads, lr)
    if not model.is_finite():
        raise TrainingDivergence("parameters became non-finite during training")
    return model


def accuracy(model: MlpModel, batch: Batch) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    return float(np.mean(predict(model, batch.features) == np.asarray(batch.targets)))
