"""Condition (task) identification from shallow features, with majority voting."""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import container
from .core import SGD, Parameter, Tensor, backward, ops
from .errors import ConfigError, DataError
from .model import Model, TrainSchedule, split_train_val

WINDOW = 8  # current frame plus the previous 7


@dataclass
class TaskClassifier:
    """Linear map from globally pooled, standardized block-1 features to condition logits."""

    weight: np.ndarray  # (K, D)
    bias: np.ndarray  # (K,)
    feature_mean: np.ndarray  # (D,)
    feature_std: np.ndarray  # (D,)
    conditions: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.weight.shape[0] != len(self.conditions):
            raise ConfigError(f"{len(self.conditions)} conditions but classifier width {self.weight.shape[0]}")

    def logits(self, pooled: np.ndarray) -> np.ndarray:
        z = (pooled - self.feature_mean) / self.feature_std
        return z @ self.weight.T + self.bias

    def index(self, condition: str) -> int:
        return self.conditions.index(condition)


def pool_features(features) -> np.ndarray:
    """Global average pool (N, C, H, W) shallow features to (N, C)."""
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    if data.ndim == 3:
        data = data[None]
    return data.mean(axis=(2, 3))


def shallow_pooled(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = [pool_features(model.forward_shallow(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    return np.concatenate(out).astype(np.float32)


def classify_frame(classifier: TaskClassifier, shallow_features) -> int | np.ndarray:
    """Argmax condition index; a scalar for a single frame, an array for a batch."""
    pred = classifier.logits(pool_features(shallow_features)).argmax(axis=1)
    single = isinstance(shallow_features, np.ndarray) and shallow_features.ndim == 3
    return int(pred[0]) if single or len(pred) == 1 else pred


def train_task_identifier(
    model: Model,
    images_by_condition: Mapping[str, np.ndarray],
    schedule: Optional[TrainSchedule] = None,
    seed: int = 0,
    conditions: Optional[Sequence[str]] = None,
) -> TaskClassifier:
    """Fit the linear condition classifier on frozen block-1 features.

    The backbone is not modified. Training uses cross-entropy with the
    plateau learning-rate schedule on a seeded 10% validation split.
    """
    schedule = schedule or TrainSchedule()
    schedule.validate()
    conditions = list(conditions or images_by_condition)
    if set(conditions) != set(images_by_condition):
        raise ConfigError(f"condition count {len(conditions)} does not match the provided image sets")
    for cond in conditions:
        if len(images_by_condition[cond]) == 0:
            raise DataError(f"condition {cond!r} has no images")
    model.set_trainable([])
    feats = np.concatenate([shallow_pooled(model, images_by_condition[c]) for c in conditions]).astype(np.float64)
    labels = np.concatenate([np.full(len(images_by_condition[c]), k) for k, c in enumerate(conditions)])
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0) + 1e-6
    z = (feats - mu) / sd

    rng = np.random.default_rng(seed)
    d, k = z.shape[1], len(conditions)
    weight = Parameter("taskid.weight", Tensor(rng.normal(0, np.sqrt(1.0 / d), (k, d)), requires_grad=True))
    bias = Parameter("taskid.bias", Tensor(np.zeros(k), requires_grad=True))
    tr, va = split_train_val(len(z), schedule.val_fraction, seed)
    zt = z[tr].astype(weight.data.dtype)
    zv = z[va].astype(weight.data.dtype)
    opt = SGD([weight, bias], schedule.initial_lr, schedule.momentum)
    lr, best, best_state, bad, drops, epochs = schedule.initial_lr, np.inf, None, 0, 0, 0
    for epoch in range(schedule.max_epochs):
        epochs += 1
        order = rng.permutation(len(tr))
        for i in range(0, len(order), schedule.batch_size):
            idx = order[i:i + schedule.batch_size]
            loss = ops.softmax_cross_entropy(ops.linear(Tensor(zt[idx]), weight.tensor, bias.tensor), labels[tr][idx])
            backward(loss)
            opt.step()
        val_err = float(((zv @ weight.data.T + bias.data).argmax(axis=1) != labels[va]).mean()) if len(va) else 0.0
        if val_err < best:
            best, best_state, bad = val_err, (weight.data.copy(), bias.data.copy()), 0
            continue
        bad += 1
        if bad >= schedule.patience_epochs:
            drops, bad = drops + 1, 0
            if drops >= schedule.max_lr_drops:
                break
            lr /= schedule.lr_decay_factor
            opt.lr = lr
    w, b = best_state if best_state is not None else (weight.data, bias.data)
    meta = {"seed": seed, "epochs": epochs, "val_error": float(best), "feature_dim": int(d),
            "checksum": model.backbone_checksum()}
    return TaskClassifier(w.astype(np.float32), b.astype(np.float32), mu.astype(np.float32),
                          sd.astype(np.float32), conditions, meta)


class VoteWindow:
    """Majority vote over the most recent ``capacity`` per-frame predictions.

    Ties are broken in favour of whichever tied id was predicted most
    recently. During warm-up only the filled slots vote.
    """

    def __init__(self, capacity: int = WINDOW):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._buf: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._buf)

    def push(self, prediction) -> None:
        self._buf.append(prediction)

    def reset(self) -> None:
        self._buf.clear()

    def contents(self) -> list:
        return list(self._buf)

    def vote(self):
        if not self._buf:
            raise ValueError("vote on an empty window")
        return vote(self._buf)


def vote(window: Sequence):
    """Modal id of ``window`` (oldest first); ties go to the most recent tied id."""
    counts = Counter(window)
    top = max(counts.values())
    tied = {k for k, v in counts.items() if v == top}
    for pred in reversed(window):
        if pred in tied:
            return pred


def oracle_task_id(metadata) -> str:
    """Ground-truth condition from external sensor metadata."""
    if isinstance(metadata, str):
        cond = metadata
    elif isinstance(metadata, Mapping):
        cond = metadata.get("condition")
    else:
        cond = getattr(metadata, "condition", None)
    if not cond:
        raise DataError("frame metadata carries no condition")
    return cond


def save_classifier(clf: TaskClassifier, path) -> int:
    arrays = {"weight": clf.weight, "bias": clf.bias, "feature_mean": clf.feature_mean,
              "feature_std": clf.feature_std}
    return container.write(path, "task-classifier", arrays, {"conditions": clf.conditions, "meta": clf.meta})


def load_classifier(path) -> TaskClassifier:
    arrays, meta = container.read(path, "task-classifier")
    return TaskClassifier(arrays["weight"], arrays["bias"], arrays["feature_mean"], arrays["feature_std"],
                          list(meta["conditions"]), meta["meta"])
