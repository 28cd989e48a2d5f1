"""Trainable CT-level classifier heads over slice-probability features.

Two small heads map a flattened (96, 3) feature matrix to a binary
diagnosis: multinomial logistic regression and a single-hidden-layer MLP
with rectifier units.  Training is plain mini-batch SGD on label-smoothed
cross-entropy with a cosine learning-rate schedule after linear warmup;
setting ``sam_rho > 0`` switches each update to the two-phase
sharpness-aware step (ascend along the normalized batch gradient, take the
gradient there, apply it at the original point).  Everything is exact
numpy, single-threaded, and bit-reproducible for a fixed seed, which keeps
the analytic gradients checkable against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .errors import (
    DegenerateLabelsError,
    DimensionMismatchError,
    InvalidDistributionError,
    MalformedRecordError,
    NonFiniteGradientError,
    NonFiniteLossError,
    OutOfRangeError,
)
from .labels import COVID, NON_COVID

KIND_LOGREG = "logreg"
KIND_MLP = "mlp"
HEAD_KINDS = (KIND_LOGREG, KIND_MLP)

#: Output class order of every head: logit row 0 scores COVID.
CLASS_ORDER = (COVID, NON_COVID)

#: Floor applied to log() arguments so a confident mistake cannot yield -inf.
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the head training loop."""

    epochs: int = 200
    lr_init: float = 1e-3
    warmup_epochs: int = 5
    batch_size: int = 32
    label_smoothing: float = 0.0
    sam_rho: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr_init > 0:
            raise ValueError(f"lr_init must be > 0, got {self.lr_init}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(
                f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError(
                f"label_smoothing must lie in [0, 1), got {self.label_smoothing}"
            )
        if self.sam_rho < 0:
            raise ValueError(f"sam_rho must be >= 0, got {self.sam_rho}")


@dataclass
class HeadModel:
    """Weights of one trained head.

    logreg: W1 is (2, d), b1 is (2,), W2 and b2 are None.
    mlp:    W1 is (hidden, d), b1 (hidden,), W2 (2, hidden), b2 (2,).
    """

    kind: str
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray | None = None
    b2: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"kind must be one of {HEAD_KINDS}, got {self.kind!r}")
        # contiguous so flat views over params() stay writable aliases
        self.W1 = np.ascontiguousarray(self.W1, dtype=np.float64)
        self.b1 = np.ascontiguousarray(self.b1, dtype=np.float64)
        if self.W1.ndim != 2 or self.b1.shape != (self.W1.shape[0],):
            raise DimensionMismatchError(
                f"W1 {self.W1.shape} and b1 {self.b1.shape} are inconsistent"
            )
        if self.kind == KIND_LOGREG:
            if self.W2 is not None or self.b2 is not None:
                raise DimensionMismatchError("logreg head must not have W2/b2")
            if self.W1.shape[0] != 2:
                raise DimensionMismatchError("logreg W1 must have 2 output rows")
        else:
            if self.W2 is None or self.b2 is None:
                raise DimensionMismatchError("mlp head needs W2 and b2")
            self.W2 = np.ascontiguousarray(self.W2, dtype=np.float64)
            self.b2 = np.ascontiguousarray(self.b2, dtype=np.float64)
            if self.W2.shape != (2, self.W1.shape[0]) or self.b2.shape != (2,):
                raise DimensionMismatchError(
                    f"W2 {self.W2.shape} / b2 {self.b2.shape} do not match "
                    f"hidden size {self.W1.shape[0]}"
                )
        for arr in self.params():
            if not np.all(np.isfinite(arr)):
                raise ValueError("head parameters must be finite")

    @property
    def n_features(self) -> int:
        return self.W1.shape[1]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in serialization order (W1, b1[, W2, b2])."""
        if self.kind == KIND_LOGREG:
            return [self.W1, self.b1]
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "HeadModel":
        return HeadModel(
            kind=self.kind,
            W1=self.W1.copy(),
            b1=self.b1.copy(),
            W2=None if self.W2 is None else self.W2.copy(),
            b2=None if self.b2 is None else self.b2.copy(),
            seed=self.seed,
        )


# ---------------------------------------------------------------------------
# schedule and loss


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate at a given epoch: linear warmup to ``lr_init`` over
    ``warmup_epochs``, then cosine decay to 0 at ``epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise OutOfRangeError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_init * (epoch + 1) / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span))


def smoothed_cross_entropy(probs, target: int, label_smoothing: float = 0.0) -> float:
    """Cross-entropy against a label-smoothed target distribution.

    The one-hot target is mixed with the uniform distribution: the true
    class gets weight 1 - e + e/C and every other class e/C.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2 or p.min() < 0 or abs(p.sum() - 1.0) > 1e-6:
        raise InvalidDistributionError(f"probs is not a distribution: {probs!r}")
    if not 0 <= label_smoothing < 1:
        raise InvalidDistributionError(
            f"label_smoothing must lie in [0, 1), got {label_smoothing}"
        )
    n_classes = p.size
    if not 0 <= target < n_classes:
        raise InvalidDistributionError(f"target {target} outside 0..{n_classes - 1}")
    q = np.full(n_classes, label_smoothing / n_classes)
    q[target] += 1.0 - label_smoothing
    return float(-(q * np.log(np.maximum(p, LOG_FLOOR))).sum())


def smoothed_targets(y: np.ndarray, label_smoothing: float,
                     n_classes: int = 2) -> np.ndarray:
    """(n, n_classes) matrix of smoothed one-hot target rows."""
    q = np.full((y.shape[0], n_classes), label_smoothing / n_classes)
    q[np.arange(y.shape[0]), y] += 1.0 - label_smoothing
    return q


# ---------------------------------------------------------------------------
# forward / backward


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(model: HeadModel, X: np.ndarray):
    """Class probabilities plus the hidden pre-activation needed by backprop."""
    if model.kind == KIND_LOGREG:
        return _softmax(X @ model.W1.T + model.b1), None
    pre_hidden = X @ model.W1.T + model.b1
    hidden = np.maximum(pre_hidden, 0.0)
    return _softmax(hidden @ model.W2.T + model.b2), pre_hidden


def batch_loss(model: HeadModel, X: np.ndarray, targets: np.ndarray) -> float:
    """Mean smoothed cross-entropy of a batch against target rows."""
    probs, _ = _forward(model, X)
    per_sample = -(targets * np.log(np.maximum(probs, LOG_FLOOR))).sum(axis=1)
    return float(per_sample.mean())


def batch_gradients(model: HeadModel, X: np.ndarray, targets: np.ndarray,
                    ) -> tuple[float, list[np.ndarray]]:
    """Loss and analytic gradients, ordered like ``model.params()``."""
    n = X.shape[0]
    if model.kind == KIND_LOGREG:
        probs = _softmax(X @ model.W1.T + model.b1)
        d_logits = (probs - targets) / n
        grads = [d_logits.T @ X, d_logits.sum(axis=0)]
    else:
        pre_hidden = X @ model.W1.T + model.b1
        hidden = np.maximum(pre_hidden, 0.0)
        probs = _softmax(hidden @ model.W2.T + model.b2)
        d_logits = (probs - targets) / n
        d_hidden = (d_logits @ model.W2) * (pre_hidden > 0.0)
        grads = [
            d_hidden.T @ X,
            d_hidden.sum(axis=0),
            d_logits.T @ hidden,
            d_logits.sum(axis=0),
        ]
    per_sample = -(targets * np.log(np.maximum(probs, LOG_FLOOR))).sum(axis=1)
    return float(per_sample.mean()), grads


def sgd_step(model: HeadModel, X: np.ndarray, targets: np.ndarray,
             lr: float) -> float:
    """One plain SGD update in place; returns the pre-update batch loss."""
    loss, grads = batch_gradients(model, X, targets)
    for param, grad in zip(model.params(), grads):
        param -= lr * grad
    return loss


def sam_step(model: HeadModel, X: np.ndarray, targets: np.ndarray,
             lr: float, rho: float) -> float:
    """One sharpness-aware update in place.

    Ascend by rho * g / ||g|| (global L2 norm over all parameters), take the
    gradient at the perturbed point, restore the parameters and descend with
    that gradient.  With rho = 0 the perturbation vanishes and the update is
    bit-identical to ``sgd_step``.
    """
    loss, grads = batch_gradients(model, X, targets)
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    scale = rho / (norm + 1e-12)
    ascent = [scale * g for g in grads]
    for param, step in zip(model.params(), ascent):
        param += step
    _, adv_grads = batch_gradients(model, X, targets)
    for param, step in zip(model.params(), ascent):
        param -= step
    for param, grad in zip(model.params(), adv_grads):
        param -= lr * grad
    return loss


# ---------------------------------------------------------------------------
# training


def as_feature_array(features) -> np.ndarray:
    """Coerce training features to a (n_samples, n_features) float matrix.

    Accepts a (n, d) matrix, a (n, rows, 3) stack of feature matrices, or a
    sequence of (rows, 3) matrices; matrices flatten row-major.
    """
    if isinstance(features, np.ndarray) and features.ndim == 2:
        arr = np.asarray(features, dtype=np.float64)
    else:
        arr = np.asarray([np.asarray(f, dtype=np.float64) for f in features])
        if arr.ndim == 3:
            arr = arr.reshape(arr.shape[0], -1)
        arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionMismatchError(
            f"features must be (n_samples, n_features), got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError("features contain non-finite values")
    return arr


def as_class_indices(labels) -> np.ndarray:
    """Map labels to class indices per CLASS_ORDER (COVID=0, NON_COVID=1)."""
    out = np.empty(len(labels), dtype=np.intp)
    for i, label in enumerate(labels):
        if label in CLASS_ORDER:
            out[i] = CLASS_ORDER.index(label)
        elif label in (0, 1):
            out[i] = int(label)
        else:
            raise ValueError(f"label {label!r} is neither a CT label nor 0/1")
    return out


def init_head(kind: str, n_features: int, seed: int,
              hidden_units: int = 100) -> HeadModel:
    """Initialize weights and biases uniformly in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)

    def layer(n_out, n_in):
        bound = 1.0 / math.sqrt(n_in)
        return (rng.uniform(-bound, bound, size=(n_out, n_in)),
                rng.uniform(-bound, bound, size=n_out))

    if kind == KIND_LOGREG:
        W1, b1 = layer(2, n_features)
        return HeadModel(KIND_LOGREG, W1, b1, seed=seed)
    if kind == KIND_MLP:
        W1, b1 = layer(hidden_units, n_features)
        W2, b2 = layer(2, hidden_units)
        return HeadModel(KIND_MLP, W1, b1, W2, b2, seed=seed)
    raise ValueError(f"kind must be one of {HEAD_KINDS}, got {kind!r}")


def train_head(features, labels, kind: str = KIND_LOGREG,
               cfg: TrainConfig = TrainConfig(),
               hidden_units: int = 100) -> HeadModel:
    """Train a head by mini-batch SGD (or SAM when ``cfg.sam_rho > 0``).

    ``features`` is anything ``as_feature_array`` accepts; ``labels`` are
    CT labels or 0/1 class indices, and both classes must be present.
    Shuffling is reseeded per epoch from ``cfg.seed``, so training is
    bit-reproducible.
    """
    X = as_feature_array(features)
    y = as_class_indices(labels)
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatchError(
            f"{X.shape[0]} feature rows vs {y.shape[0]} labels"
        )
    if X.shape[0] < 2 or len(np.unique(y)) < 2:
        raise DegenerateLabelsError("training needs samples from both classes")

    model = init_head(kind, X.shape[1], cfg.seed, hidden_units)
    targets = smoothed_targets(y, cfg.label_smoothing)
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            if cfg.sam_rho > 0:
                loss = sam_step(model, X[batch], targets[batch], lr, cfg.sam_rho)
            else:
                loss = sgd_step(model, X[batch], targets[batch], lr)
            if not math.isfinite(loss):
                raise NonFiniteLossError(
                    f"loss became {loss} at epoch {epoch}"
                )
    return model


def predict_head(model: HeadModel, features) -> np.ndarray:
    """Class distribution(s) for one feature matrix or a batch.

    A flat (d,) vector or a single (rows, 3) matrix with rows*3 == d yields
    a (2,) distribution; (n, d) or (n, rows, 3) batches yield (n, 2).
    Columns follow CLASS_ORDER.
    """
    arr = np.asarray(features, dtype=np.float64)
    single = False
    if arr.ndim == 1:
        arr = arr[None, :]
        single = True
    elif arr.ndim == 2 and arr.shape[1] != model.n_features:
        if arr.size != model.n_features:
            raise DimensionMismatchError(
                f"input shape {arr.shape} does not match {model.n_features} features"
            )
        arr = arr.reshape(1, -1)
        single = True
    elif arr.ndim == 3:
        arr = arr.reshape(arr.shape[0], -1)
    if arr.ndim != 2 or arr.shape[1] != model.n_features:
        raise DimensionMismatchError(
            f"input shape {np.asarray(features).shape} does not match "
            f"{model.n_features} features"
        )
    probs, _ = _forward(model, arr)
    return probs[0] if single else probs


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(model: HeadModel, X, labels, label_smoothing: float = 0.0,
               step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every parameter entry is perturbed by +-step; the relative error is
    |g_a - g_n| / max(1, |g_a|, |g_n|).  The model is left unchanged.
    """
    X = as_feature_array(X)
    y = as_class_indices(labels)
    if X.shape[0] == 0:
        raise DimensionMismatchError("gradient check needs a non-empty batch")
    targets = smoothed_targets(y, label_smoothing)
    work = model.copy()
    _, analytic = batch_gradients(work, X, targets)
    worst = 0.0
    for param, grad in zip(work.params(), analytic):
        flat = param.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            loss_plus = batch_loss(work, X, targets)
            flat[i] = original - step
            loss_minus = batch_loss(work, X, targets)
            flat[i] = original
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            analytic_value = grad_flat[i]
            if not (math.isfinite(numeric) and math.isfinite(analytic_value)):
                raise NonFiniteGradientError(
                    f"non-finite gradient: analytic {analytic_value}, numeric {numeric}"
                )
            err = abs(analytic_value - numeric) / max(
                1.0, abs(analytic_value), abs(numeric)
            )
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialization (text, 17 significant digits, byte-stable round-trips)


def save_head(model: HeadModel, file) -> None:
    """Write a head as text: 'kind,dims,seed' header, one parameter per line
    (W1 row-major, b1, then W2 row-major, b2 for MLPs)."""
    if model.kind == KIND_LOGREG:
        dims = f"{model.n_features}:2"
    else:
        dims = f"{model.n_features}:{model.W1.shape[0]}:2"
    with open(file, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"{model.kind},{dims},{model.seed}\n")
        for param in model.params():
            for value in param.reshape(-1):
                fh.write(f"{value:.17g}\n")


def load_head(file) -> HeadModel:
    with open(file, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MalformedRecordError("empty head-model file")
    header = lines[0].split(",")
    if len(header) != 3:
        raise MalformedRecordError(f"bad header {lines[0]!r}", 1)
    kind, dims_text, seed_text = header
    try:
        dims = [int(d) for d in dims_text.split(":")]
        seed = int(seed_text)
    except ValueError:
        raise MalformedRecordError(f"bad header {lines[0]!r}", 1) from None
    if kind == KIND_LOGREG and len(dims) == 2 and dims[1] == 2:
        shapes = [(2, dims[0]), (2,)]
    elif kind == KIND_MLP and len(dims) == 3 and dims[2] == 2:
        shapes = [(dims[1], dims[0]), (dims[1],), (2, dims[1]), (2,)]
    else:
        raise MalformedRecordError(f"bad kind/dims {lines[0]!r}", 1)
    expected = sum(int(np.prod(s)) for s in shapes)
    values = lines[1:]
    if len(values) != expected:
        raise MalformedRecordError(
            f"expected {expected} parameter lines, got {len(values)}"
        )
    try:
        flat = np.array([float(v) for v in values], dtype=np.float64)
    except ValueError as exc:
        raise MalformedRecordError(str(exc)) from None
    arrays = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(flat[offset:offset + size].reshape(shape))
        offset += size
    if kind == KIND_LOGREG:
        return HeadModel(kind, arrays[0], arrays[1], seed=seed)
    return HeadModel(kind, arrays[0], arrays[1], arrays[2], arrays[3], seed=seed)


# ---------------------------------------------------------------------------
# sklearn-style estimator


class HeadClassifier(BaseEstimator, ClassifierMixin):
    """Scikit-learn estimator facade over ``train_head`` / ``predict_head``.

    Accepts (n, d) feature matrices or (n, rows, 3) stacks; class order in
    ``predict_proba`` follows ``classes_`` (np.unique of y).  The estimator
    composes with sklearn pipelines and model selection, while training
    itself stays the exact in-package SGD/SAM loop.
    """

    def __init__(self, kind: str = KIND_LOGREG, hidden_units: int = 100,
                 epochs: int = 200, lr_init: float = 1e-3,
                 warmup_epochs: int = 5, batch_size: int = 32,
                 label_smoothing: float = 0.0, sam_rho: float = 0.0,
                 seed: int = 0):
        self.kind = kind
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.lr_init = lr_init
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.label_smoothing = label_smoothing
        self.sam_rho = sam_rho
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr_init=self.lr_init,
            warmup_epochs=self.warmup_epochs,
            batch_size=self.batch_size,
            label_smoothing=self.label_smoothing,
            sam_rho=self.sam_rho,
            seed=self.seed,
        )

    def fit(self, X, y):
        X = as_feature_array(X)
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise DimensionMismatchError(
                f"{X.shape[0]} samples vs {y.shape[0]} labels"
            )
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] != 2:
            raise DegenerateLabelsError(
                f"expected exactly 2 classes, got {list(self.classes_)}"
            )
        self.model_ = train_head(X, y_idx, kind=self.kind, cfg=self._config(),
                                 hidden_units=self.hidden_units)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = as_feature_array(X)
        return predict_head(self.model_, X)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
