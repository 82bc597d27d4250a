"""Training orchestration: single runs, grid search, linear baselines, and
the multi-facility balanced protocol.

Conventions fixed here rather than in the network core:

* features are z-scored with statistics from the training split only; the
  scaler rides along in the checkpoint so inference stays consistent;
* early stopping watches validation data loss (no L1 term) with a fixed
  patience, and the returned model is the best-validation-loss checkpoint;
* the linear baselines are 0-hidden-layer networks trained with the same
  machinery: binary cross-entropy for logistic regression, hinge for the
  linear SVM;
* multi-facility training downsamples every facility's training split to the
  smallest one, pools and shuffles without any facility identifier, then
  evaluates on each facility's own held-out test split.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import TrainingError, ValidationError
from .features import Dataset, FeatureVocabulary, _finite_matrix
from .metrics import confusion_at_threshold, records_from_arrays, roc_curve
from .network import (
    Batch,
    MlpConfig,
    MlpModel,
    backward,
    forward,
    init_model,
    loss_eval,
    optimizer_step,
    predict_proba,
    tapered_widths,
)
from .rng import derive_rng


@dataclass(frozen=True)
class TrainSchedule:
    max_epochs: int = 60
    patience: int = 5
    batch_size: int = 256
    shuffle_seed: int = 0

    def validate(self):
        if self.max_epochs < 0:
            raise ValidationError("max_epochs must be >= 0")
        if self.patience > self.max_epochs:
            raise ValidationError("patience must not exceed max_epochs")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


class Standardizer:
    """Per-column z-scoring with train-split statistics."""

    def __init__(self, mean=None, std=None):
        self.mean = None if mean is None else np.asarray(mean, dtype=float)
        self.std = None if std is None else np.asarray(std, dtype=float)

    def fit(self, X: np.ndarray) -> "Standardizer":
        X = _finite_matrix(X, "training matrix")
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        std[std < 1e-12] = 1.0
        self.std = std
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        if self.mean is None:
            raise ValidationError("standardizer is not fitted")
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, payload: dict | None) -> "Standardizer | None":
        if payload is None:
            return None
        return cls(payload["mean"], payload["std"])


@dataclass
class RunRecord:
    name: str
    config: dict
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_f1: float = 0.0
    epochs_run: int = 0
    best_epoch: int = -1
    wall_time: float = 0.0
    seed: int = 0
    error: str = ""
    n_parameters: int = 0


@dataclass
class TrainResult:
    model: MlpModel
    record: RunRecord
    scaler: Standardizer | None

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.scaler is not None:
            X = self.scaler.transform(X)
        return predict_proba(self.model, X)


def _f1_at_half(probs: np.ndarray, y: np.ndarray) -> float:
    records = records_from_arrays(range(len(y)), probs, y)
    try:
        return confusion_at_threshold(records).f1
    except ValidationError:
        return 0.0


def train(
    config: MlpConfig,
    schedule: TrainSchedule,
    train_data: Dataset,
    val_data: Dataset,
    standardize: bool = True,
    name: str = "run",
) -> TrainResult:
    """Mini-batch training with early stopping on validation data loss."""
    schedule.validate()
    if train_data.X.shape[1] != config.input_dim:
        raise ValidationError(
            f"training width {train_data.X.shape[1]} != input_dim {config.input_dim}"
        )
    started = time.perf_counter()
    scaler = Standardizer().fit(train_data.X) if standardize else None
    X_train = scaler.transform(train_data.X) if scaler else train_data.X
    X_val = scaler.transform(val_data.X) if scaler and len(val_data) else val_data.X
    y_train, y_val = train_data.y, val_data.y

    model = init_model(config)
    record = RunRecord(
        name=name, config=config.to_json(), seed=config.seed, n_parameters=model.n_parameters()
    )
    if schedule.max_epochs == 0:
        record.wall_time = time.perf_counter() - started
        return TrainResult(model, record, scaler)

    best = model.copy()
    best_loss = np.inf
    stall = 0
    n = X_train.shape[0]
    for epoch in range(schedule.max_epochs):
        order = derive_rng(schedule.shuffle_seed, "epoch", epoch).permutation(n)
        for b_idx, start in enumerate(range(0, n, schedule.batch_size)):
            idx = order[start: start + schedule.batch_size]
            batch = Batch(X_train[idx], y_train[idx])
            rng = derive_rng(config.seed, "dropout", epoch, b_idx)
            probs, cache = forward(model, batch.X, training=True, rng=rng)
            grads = backward(model, cache, batch.y)
            optimizer_step(model, grads)

        train_probs = predict_proba(model, X_train)
        epoch_train_loss = loss_eval(config.loss, train_probs, y_train, model, config.l1_lambda)
        if not np.isfinite(epoch_train_loss):
            raise TrainingError(f"training diverged (non-finite loss) at epoch {epoch}")
        record.train_loss.append(epoch_train_loss)
        record.epochs_run = epoch + 1

        if len(val_data):
            val_probs = predict_proba(model, X_val)
            epoch_val_loss = loss_eval(config.loss, val_probs, y_val)
        else:
            epoch_val_loss = epoch_train_loss
        record.val_loss.append(epoch_val_loss)

        if epoch_val_loss < best_loss - 1e-12:
            best_loss = epoch_val_loss
            best = model.copy()
            record.best_epoch = epoch
            stall = 0
        else:
            stall += 1
            if stall >= schedule.patience:
                break

    result = TrainResult(best, record, scaler)
    if len(val_data):
        record.val_f1 = _f1_at_half(result.predict(val_data.X), y_val)
    record.wall_time = time.perf_counter() - started
    return result


# --- hyperparameter grid ------------------------------------------------------


@dataclass(frozen=True)
class SearchGrid:
    activations: tuple = ("tanh", "relu", "selu")
    optimizers: tuple = ("adam", "sgd")
    losses: tuple = ("mse", "mae", "bce", "hinge")
    depths: tuple = tuple(range(2, 16))

    def validate(self):
        if not (self.activations and self.optimizers and self.losses and self.depths):
            raise ValidationError("search grid axes must be non-empty")
        if any(d < 2 or d > 15 for d in self.depths):
            raise ValidationError("grid depths must lie in [2, 15]")

    def points(self):
        for act in self.activations:
            for opt in self.optimizers:
                for loss in self.losses:
                    for depth in self.depths:
                        yield act, opt, loss, depth


def hyperparameter_search(
    grid: SearchGrid,
    schedule: TrainSchedule,
    train_data: Dataset,
    val_data: Dataset,
    seed: int = 0,
    threads: int = 1,
) -> list[TrainResult]:
    """Train every grid point with a fixed seed and rank the outcomes.

    Ranking: validation F1 (desc), then validation loss (asc), then parameter
    count (asc). A diverging point is recorded with its error, never fatal.
    """
    grid.validate()
    input_dim = train_data.X.shape[1]

    def run_point(point) -> TrainResult:
        act, opt, loss, depth = point
        name = f"{act}-{opt}-{loss}-d{depth}"
        config = MlpConfig(
            input_dim=input_dim,
            hidden_layers=tapered_widths(input_dim, depth),
            activation=act,
            loss=loss,
            optimizer=opt,
            seed=seed,
        )
        try:
            return train(config, schedule, train_data, val_data, name=name)
        except TrainingError as exc:
            record = RunRecord(name=name, config=config.to_json(), seed=seed, error=str(exc))
            return TrainResult(init_model(config), record, None)

    points = list(grid.points())
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_point, points))
    else:
        results = [run_point(p) for p in points]

    def rank_key(result: TrainResult):
        r = result.record
        failed = 1 if r.error else 0
        best_val = min(r.val_loss) if r.val_loss else np.inf
        return (failed, -r.val_f1, best_val, r.n_parameters)

    results.sort(key=rank_key)
    return results


# --- baselines ----------------------------------------------------------------

BASELINE_KINDS = ("logistic", "linear_svm")


def baseline_config(kind: str, input_dim: int, seed: int = 0) -> MlpConfig:
    if kind not in BASELINE_KINDS:
        raise ValidationError(f"unknown baseline kind {kind!r}")
    return MlpConfig(
        input_dim=input_dim,
        hidden_layers=(),
        activation="tanh",  # unused at depth 0
        loss="bce" if kind == "logistic" else "hinge",
        l1_lambda=0.0,
        dropout_rate=0.0,
        optimizer="adam",
        learning_rate=1e-3,
        seed=seed,
        allow_linear=True,
    )


def train_baseline(
    kind: str,
    schedule: TrainSchedule,
    train_data: Dataset,
    val_data: Dataset,
    seed: int = 0,
) -> TrainResult:
    """Logistic regression / linear SVM as 0-hidden-layer networks."""
    config = baseline_config(kind, train_data.X.shape[1], seed)
    return train(config, schedule, train_data, val_data, name=kind)


# --- multi-facility protocol ----------------------------------------------------


@dataclass
class FacilityEvaluation:
    facility_id: str
    f1: float
    auroc: float
    n_test: int


def multi_facility_train(
    per_facility: dict[str, tuple[Dataset, Dataset, Dataset]],
    config: MlpConfig,
    schedule: TrainSchedule,
    seed: int = 0,
    vocabulary: FeatureVocabulary | None = None,
) -> tuple[TrainResult, list[FacilityEvaluation], dict]:
    """Balanced multi-facility training with per-facility test evaluation.

    The pool draws an equal encounter count from every facility's training
    split (downsampling to the smallest), shuffles, and carries no facility
    identifier. Facilities whose training split lacks positives are excluded
    with a warning recorded in the returned info dict.
    """
    if len(per_facility) < 2:
        raise ValidationError("multi-facility training needs >= 2 facility bundles")
    if vocabulary is not None:
        leaky = [n for n in vocabulary.names if "facility" in n.lower()]
        if leaky:
            raise ValidationError(f"facility identifier leaked into features: {leaky}")

    info: dict = {"warnings": [], "pool_per_facility": 0}
    usable = {}
    for fac, (tr, va, te) in sorted(per_facility.items()):
        if tr.y.sum() < 1:
            info["warnings"].append(f"facility {fac} excluded: no positive training cases")
            continue
        usable[fac] = (tr, va, te)
    if len(usable) < 2:
        raise ValidationError("fewer than 2 usable facilities after exclusions")

    pool_n = min(len(tr) for tr, _, _ in usable.values())
    info["pool_per_facility"] = pool_n
    rng = derive_rng(seed, "facility-pool")
    X_parts, y_parts, id_parts = [], [], []
    Xv_parts, yv_parts, idv_parts = [], [], []
    for fac, (tr, va, _) in sorted(usable.items()):
        take = rng.permutation(len(tr))[:pool_n]
        X_parts.append(tr.X[take])
        y_parts.append(tr.y[take])
        id_parts.extend(tr.ids[i] for i in take)
        Xv_parts.append(va.X)
        yv_parts.append(va.y)
        idv_parts.extend(va.ids)

    X_pool = np.concatenate(X_parts)
    y_pool = np.concatenate(y_parts)
    order = rng.permutation(len(y_pool))
    pool = Dataset(X_pool[order], y_pool[order], [id_parts[i] for i in order])
    val_pool = Dataset(np.concatenate(Xv_parts), np.concatenate(yv_parts), idv_parts)

    result = train(config, schedule, pool, val_pool, name="multi-facility")

    evaluations = []
    for fac, (_, _, te) in sorted(usable.items()):
        probs = result.predict(te.X)
        records = records_from_arrays(te.ids, probs, te.y)
        f1 = _f1_at_half(probs, te.y)
        try:
            _, auroc = roc_curve(records)
        except ValidationError:
            auroc = float("nan")
        evaluations.append(FacilityEvaluation(fac, f1, auroc, len(te)))
    return result, evaluations, info


# --- sklearn-style facade -------------------------------------------------------


class MlpClassifier(BaseEstimator, ClassifierMixin):
    """Sklearn-compatible binary classifier over the from-scratch network.

    ``hidden_layers`` may be an explicit width tuple, a depth (int, widths
    tapered from the input width), or ``()`` for the linear special case.
    A stratified 15% slice of the training data is held out internally for
    early stopping.
    """

    def __init__(
        self,
        hidden_layers=10,
        activation: str = "tanh",
        loss: str = "mse",
        optimizer: str = "adam",
        learning_rate: float = 1e-3,
        l1_lambda: float = 1e-5,
        dropout_rate: float = 0.2,
        max_epochs: int = 60,
        patience: int = 5,
        batch_size: int = 256,
        standardize: bool = True,
        seed: int = 0,
    ):
        self.hidden_layers = hidden_layers
        self.activation = activation
        self.loss = loss
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.l1_lambda = l1_lambda
        self.dropout_rate = dropout_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.standardize = standardize
        self.seed = seed

    def _config(self, input_dim: int) -> MlpConfig:
        if isinstance(self.hidden_layers, int):
            widths = tapered_widths(input_dim, self.hidden_layers)
        else:
            widths = tuple(self.hidden_layers)
        return MlpConfig(
            input_dim=input_dim,
            hidden_layers=widths,
            activation=self.activation,
            loss=self.loss,
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            l1_lambda=self.l1_lambda,
            dropout_rate=self.dropout_rate,
            seed=self.seed,
            allow_linear=not widths,
        )

    def fit(self, X, y):
        X = _finite_matrix(X, "X")
        y = np.asarray(y, dtype=float).ravel()
        if set(np.unique(y)) - {0.0, 1.0}:
            raise ValidationError("labels must be binary 0/1")
        rng = derive_rng(self.seed, "val-carve")
        pos = np.flatnonzero(y == 1.0)
        neg = np.flatnonzero(y == 0.0)
        val_idx = np.concatenate(
            [
                rng.permutation(pos)[: max(1, int(0.15 * len(pos)))],
                rng.permutation(neg)[: max(1, int(0.15 * len(neg)))],
            ]
        )
        mask = np.zeros(len(y), dtype=bool)
        mask[val_idx] = True
        ids = [str(i) for i in range(len(y))]
        train_ds = Dataset(X[~mask], y[~mask], [i for i, m in zip(ids, mask) if not m])
        val_ds = Dataset(X[mask], y[mask], [i for i, m in zip(ids, mask) if m])
        schedule = TrainSchedule(
            max_epochs=self.max_epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            shuffle_seed=self.seed,
        )
        result = train(
            self._config(X.shape[1]), schedule, train_ds, val_ds, standardize=self.standardize
        )
        self.result_ = result
        self.classes_ = np.array([0.0, 1.0])
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        p = self.result_.predict(_finite_matrix(X, "X"))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(float)
