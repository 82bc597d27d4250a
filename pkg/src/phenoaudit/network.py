"""Dense feed-forward network built from first principles.

Everything is plain numpy in 64-bit floats: forward pass, backpropagation,
Adam and SGD-with-momentum updates, L1 regularization, and inverted dropout.
The output layer is always a single sigmoid unit emitting a probability.

Loss functions (per-sample, averaged over the batch, plus ``l1_lambda *
sum(|W|)`` over weight matrices):

* ``mse``   -- squared error (p - y)^2
* ``mae``   -- absolute error |p - y|
* ``bce``   -- binary cross-entropy
* ``hinge`` -- binary hinge on the margin score 2p - 1 against labels
  mapped to {-1, +1}; this is the single-output reading of a hinge loss
  over two classes.

Gradient conventions: SGD uses ``velocity = momentum * velocity + grad;
param -= lr * velocity``. Adam uses the standard bias-corrected moment
estimates. The L1 term contributes ``sign(w)`` (0 at exactly 0) to weight
gradients only; biases are not regularized.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError, ValidationError
from .rng import derive_rng

ACTIVATIONS = ("tanh", "relu", "selu")
LOSSES = ("mse", "mae", "bce", "hinge")
OPTIMIZERS = ("adam", "sgd")

# Standard self-normalizing constants.
SELU_ALPHA = 1.6732632423543772848170429916717
SELU_LAMBDA = 1.0507009873554804934193349852946

CHECKPOINT_FORMAT = "phenoaudit-mlp/1"


@dataclass
class MlpConfig:
    input_dim: int
    hidden_layers: tuple[int, ...] = ()
    activation: str = "tanh"
    loss: str = "mse"
    l1_lambda: float = 1e-5
    dropout_rate: float = 0.1
    optimizer: str = "adam"
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    momentum: float = 0.9
    seed: int = 0
    # Depth 0 is reserved for the linear baselines (logistic / linear SVM);
    # the supported deep range starts at 2 hidden layers.
    allow_linear: bool = False

    def __post_init__(self):
        self.hidden_layers = tuple(int(w) for w in self.hidden_layers)
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.hidden_layers and not self.allow_linear:
            raise ConfigError("at least one hidden layer required (grid starts at 2)")
        if any(w < 1 for w in self.hidden_layers):
            raise ConfigError(f"hidden widths must be >= 1, got {self.hidden_layers}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.l1_lambda < 0:
            raise ConfigError("l1_lambda must be nonnegative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden_layers, 1]
        return list(zip(widths[:-1], widths[1:]))

    def to_json(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "activation": self.activation,
            "loss": self.loss,
            "l1_lambda": self.l1_lambda,
            "dropout_rate": self.dropout_rate,
            "optimizer": self.optimizer,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "momentum": self.momentum,
            "seed": self.seed,
            "allow_linear": self.allow_linear,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "MlpConfig":
        payload = dict(payload)
        payload["hidden_layers"] = tuple(payload["hidden_layers"])
        return cls(**payload)


def tapered_widths(input_dim: int, depth: int, floor: int = 16) -> tuple[int, ...]:
    """Default hidden widths: start at the input width, halve each layer."""
    widths = []
    w = input_dim
    for _ in range(depth):
        widths.append(max(floor, w))
        w = w // 2
    return tuple(widths)


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise ValidationError("batch must be a non-empty 2-d matrix")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValidationError("batch features and labels differ in length")
        if not np.all((self.y == 0.0) | (self.y == 1.0)):
            raise ValidationError("labels must be 0/1")


@dataclass
class MlpModel:
    config: MlpConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    opt_m: list[np.ndarray] = field(default_factory=list)
    opt_v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def n_parameters(self) -> int:
        return int(sum(w.size for w in self.weights) + sum(b.size for b in self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(
            config=replace(self.config),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            opt_m=[m.copy() for m in self.opt_m],
            opt_v=[v.copy() for v in self.opt_v],
            step=self.step,
        )


def init_model(config: MlpConfig) -> MlpModel:
    """Fan-in-scaled normal init (2/fan_in for relu, 1/fan_in otherwise)."""
    rng = derive_rng(config.seed, "init")
    gain = 2.0 if config.activation == "relu" else 1.0
    weights, biases = [], []
    for fan_in, fan_out in config.layer_dims:
        scale = np.sqrt(gain / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    model = MlpModel(config=config, weights=weights, biases=biases)
    model.opt_m = [np.zeros_like(w) for w in weights + biases]
    model.opt_v = [np.zeros_like(w) for w in weights + biases]
    return model


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(0.0, z)
    return SELU_LAMBDA * np.where(z > 0, z, SELU_ALPHA * (np.exp(z) - 1.0))


def _activate_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(float)
    return SELU_LAMBDA * np.where(z > 0, 1.0, SELU_ALPHA * np.exp(z))


@dataclass
class ForwardCache:
    inputs: np.ndarray
    zs: list[np.ndarray]
    activations: list[np.ndarray]
    masks: list[np.ndarray | None]
    probs: np.ndarray
    training: bool


def forward(
    model: MlpModel,
    X: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network; returns probabilities in (0,1) and the backward cache.

    Inverted dropout scales kept units by 1/(1-rate) at training time so the
    evaluation pass needs no rescaling.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.config.input_dim:
        raise ShapeError(
            f"batch width {X.shape[1] if X.ndim == 2 else '?'} != input_dim {model.config.input_dim}"
        )
    rate = model.config.dropout_rate
    if training and rate > 0.0 and rng is None:
        rng = derive_rng(model.config.seed, "dropout", model.step)

    a = X
    zs, activations, masks = [], [], []
    n_hidden = len(model.config.hidden_layers)
    for i in range(n_hidden):
        z = a @ model.weights[i] + model.biases[i]
        a = _activate(model.config.activation, z)
        mask = None
        if training and rate > 0.0:
            mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
            a = a * mask
        zs.append(z)
        activations.append(a)
        masks.append(mask)
    z_out = a @ model.weights[-1] + model.biases[-1]
    probs = sigmoid(z_out).ravel()
    cache = ForwardCache(X, zs, activations, masks, probs, training)
    return probs, cache


def l1_penalty(model: MlpModel, l1_lambda: float) -> float:
    if l1_lambda == 0.0:
        return 0.0
    return l1_lambda * float(sum(np.abs(w).sum() for w in model.weights))


def loss_eval(
    loss: str,
    probs: np.ndarray,
    labels: np.ndarray,
    model: MlpModel | None = None,
    l1_lambda: float = 0.0,
) -> float:
    """Mean per-sample loss plus the L1 weight penalty."""
    probs = np.asarray(probs, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    if probs.size == 0:
        raise ValidationError("loss over an empty batch is undefined")
    if probs.shape != labels.shape:
        raise ValidationError("probabilities and labels differ in length")
    if loss == "mse":
        per = (probs - labels) ** 2
    elif loss == "mae":
        per = np.abs(probs - labels)
    elif loss == "bce":
        p = np.clip(probs, 1e-12, 1.0 - 1e-12)
        per = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    elif loss == "hinge":
        t = 2.0 * labels - 1.0
        s = 2.0 * probs - 1.0
        per = np.maximum(0.0, 1.0 - t * s)
    else:
        raise ConfigError(f"unknown loss {loss!r}")
    penalty = l1_penalty(model, l1_lambda) if model is not None else 0.0
    return float(per.mean() + penalty)


def _loss_grad_z(loss: str, probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean loss)/d(output preactivation), one value per sample."""
    n = probs.shape[0]
    pq = probs * (1.0 - probs)  # sigmoid'(z)
    if loss == "mse":
        return 2.0 * (probs - labels) * pq / n
    if loss == "mae":
        return np.sign(probs - labels) * pq / n
    if loss == "bce":
        return (probs - labels) / n
    t = 2.0 * labels - 1.0
    s = 2.0 * probs - 1.0
    active = (t * s < 1.0).astype(float)
    return (-t * active) * 2.0 * pq / n


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def backward(
    model: MlpModel,
    cache: ForwardCache,
    labels: np.ndarray,
    loss: str | None = None,
) -> Gradients:
    """Backpropagate through the cached forward pass.

    Dropout masks recorded in the cache are replayed, so gradients match the
    exact stochastic function evaluated in the forward call. Includes the L1
    subgradient (sign(w), 0 at w == 0) when the config sets ``l1_lambda``.
    """
    loss = loss or model.config.loss
    labels = np.asarray(labels, dtype=float).ravel()
    if labels.shape != cache.probs.shape:
        raise ValidationError("labels do not match cached batch")
    n_hidden = len(model.config.hidden_layers)
    if len(cache.zs) != n_hidden or cache.inputs.shape[1] != model.config.input_dim:
        raise ValidationError("stale forward cache for this model")

    dW = [np.zeros_like(w) for w in model.weights]
    db = [np.zeros_like(b) for b in model.biases]

    delta = _loss_grad_z(loss, cache.probs, labels).reshape(-1, 1)
    a_prev = cache.activations[-1] if n_hidden else cache.inputs
    dW[-1] = a_prev.T @ delta
    db[-1] = delta.sum(axis=0)
    grad_a = delta @ model.weights[-1].T

    for i in range(n_hidden - 1, -1, -1):
        if cache.masks[i] is not None:
            grad_a = grad_a * cache.masks[i]
        grad_z = grad_a * _activate_grad(
            model.config.activation, cache.zs[i], cache.activations[i]
        )
        a_prev = cache.activations[i - 1] if i > 0 else cache.inputs
        dW[i] = a_prev.T @ grad_z
        db[i] = grad_z.sum(axis=0)
        if i > 0:
            grad_a = grad_z @ model.weights[i].T

    if model.config.l1_lambda > 0.0:
        for i, w in enumerate(model.weights):
            dW[i] += model.config.l1_lambda * np.sign(w)
    return Gradients(dW, db)


def optimizer_step(model: MlpModel, grads: Gradients) -> MlpModel:
    """Apply one Adam or momentum-SGD update in place."""
    flat_params = model.weights + model.biases
    flat_grads = grads.weights + grads.biases
    for i, g in enumerate(flat_grads):
        if g.shape != flat_params[i].shape:
            raise ShapeError("gradient shapes do not match parameters")
        if not np.all(np.isfinite(g)):
            kind = "weights" if i < len(model.weights) else "biases"
            layer = i if i < len(model.weights) else i - len(model.weights)
            raise TrainingError(f"non-finite gradient in layer {layer} {kind}")

    cfg = model.config
    model.step += 1
    if cfg.optimizer == "adam":
        t = model.step
        for i, g in enumerate(flat_grads):
            model.opt_m[i] = cfg.beta1 * model.opt_m[i] + (1.0 - cfg.beta1) * g
            model.opt_v[i] = cfg.beta2 * model.opt_v[i] + (1.0 - cfg.beta2) * g * g
            m_hat = model.opt_m[i] / (1.0 - cfg.beta1**t)
            v_hat = model.opt_v[i] / (1.0 - cfg.beta2**t)
            flat_params[i] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    else:
        for i, g in enumerate(flat_grads):
            model.opt_m[i] = cfg.momentum * model.opt_m[i] + g
            flat_params[i] -= cfg.learning_rate * model.opt_m[i]
    return model


def predict_proba(model: MlpModel, X: np.ndarray) -> np.ndarray:
    probs, _ = forward(model, X, training=False)
    return probs


# --- gradient checking -----------------------------------------------------

def _flatten(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def _param_views(model: MlpModel) -> list[np.ndarray]:
    return model.weights + model.biases


@dataclass
class GradCheckResult:
    max_rel_err: float
    n_checked: int
    n_excluded: int


def grad_check(
    config: MlpConfig,
    X: np.ndarray,
    y: np.ndarray,
    epsilon: float = 1e-6,
    kink_margin: float = 1e-4,
) -> GradCheckResult:
    """Compare backprop to central finite differences over every parameter.

    Dropout is forced off. Parameters within ``kink_margin`` of a ReLU, SELU,
    hinge, or L1 nondifferentiability are excluded from the comparison: an L1
    kink excludes the near-zero weight itself; an activation or hinge kink
    excludes every parameter that can move the offending preactivation or
    margin. The relative error uses an absolute floor of 1e-3 in the
    denominator so entries below finite-difference resolution are compared on
    an absolute scale.
    """
    config = replace(config, dropout_rate=0.0)
    model = init_model(config)
    batch = Batch(X, y)

    probs, cache = forward(model, batch.X, training=False)
    grads = backward(model, cache, batch.y)
    analytic = _flatten(grads.weights + grads.biases)

    views = _param_views(model)
    sizes = [v.size for v in views]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]

    excluded = np.zeros(total, dtype=bool)
    n_weights = len(model.weights)

    if config.l1_lambda > 0.0:
        margin = max(10.0 * epsilon, kink_margin)
        for i in range(n_weights):
            flat = np.abs(views[i].ravel()) <= margin
            excluded[offsets[i]: offsets[i + 1]] |= flat

    if config.activation in ("relu", "selu"):
        kink_layer = None
        for li, z in enumerate(cache.zs):
            if np.any(np.abs(z) <= kink_margin):
                kink_layer = li if kink_layer is None else min(kink_layer, li)
        if kink_layer is not None:
            # everything at or upstream of the kink layer can move the gate
            for i in range(kink_layer + 1):
                excluded[offsets[i]: offsets[i + 1]] = True
                j = n_weights + i
                excluded[offsets[j]: offsets[j + 1]] = True

    if config.loss == "hinge":
        t = 2.0 * batch.y - 1.0
        s = 2.0 * probs - 1.0
        if np.any(np.abs(t * s - 1.0) <= kink_margin):
            excluded[:] = True

    numeric = np.zeros(total)
    for i in range(total):
        if excluded[i]:
            continue
        view_idx = int(np.searchsorted(offsets, i, side="right")) - 1
        local = i - offsets[view_idx]
        flat_view = views[view_idx].ravel()
        original = flat_view[local]
        flat_view[local] = original + epsilon
        p_plus, _ = forward(model, batch.X, training=False)
        loss_plus = loss_eval(config.loss, p_plus, batch.y, model, config.l1_lambda)
        flat_view[local] = original - epsilon
        p_minus, _ = forward(model, batch.X, training=False)
        loss_minus = loss_eval(config.loss, p_minus, batch.y, model, config.l1_lambda)
        flat_view[local] = original
        numeric[i] = (loss_plus - loss_minus) / (2.0 * epsilon)

    keep = ~excluded
    if not np.any(keep):
        return GradCheckResult(0.0, 0, int(excluded.sum()))
    diff = np.abs(analytic[keep] - numeric[keep])
    denom = np.maximum(np.abs(analytic[keep]) + np.abs(numeric[keep]), 1e-3)
    return GradCheckResult(
        max_rel_err=float((diff / denom).max()),
        n_checked=int(keep.sum()),
        n_excluded=int(excluded.sum()),
    )


# --- checkpoints -------------------------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode(),
    }


def _decode_array(payload: dict) -> np.ndarray:
    raw = base64.b64decode(payload["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(payload["shape"]).copy()


def save_model(
    model: MlpModel,
    path,
    vocab_hash: str = "",
    scaler: dict | None = None,
    extra: dict | None = None,
) -> None:
    """Write a self-describing single-file checkpoint (JSON, versioned)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_json(),
        "vocab_hash": vocab_hash,
        "step": model.step,
        "weights": [_encode_array(w) for w in model.weights],
        "biases": [_encode_array(b) for b in model.biases],
        "opt_m": [_encode_array(m) for m in model.opt_m],
        "opt_v": [_encode_array(v) for v in model.opt_v],
        "scaler": scaler,
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_model(path) -> tuple[MlpModel, dict]:
    """Read a checkpoint; returns (model, metadata with vocab_hash/scaler)."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unsupported checkpoint format {payload.get('format')!r}")
    model = MlpModel(
        config=MlpConfig.from_json(payload["config"]),
        weights=[_decode_array(w) for w in payload["weights"]],
        biases=[_decode_array(b) for b in payload["biases"]],
        opt_m=[_decode_array(m) for m in payload["opt_m"]],
        opt_v=[_decode_array(v) for v in payload["opt_v"]],
        step=payload["step"],
    )
    meta = {
        "vocab_hash": payload.get("vocab_hash", ""),
        "scaler": payload.get("scaler"),
        "extra": payload.get("extra", {}),
    }
    return model, meta
