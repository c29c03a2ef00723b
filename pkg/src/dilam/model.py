"""Small convolutional classifier with a shallow/deep split and clear-condition pre-training.

Layout for the default config (widths ``[16, 32, 64, 128]``)::

    block1: conv-norm-relu, conv-norm-relu, conv-relu      <- cut (task-identifier features)
    block2..4: maxpool 2x2, conv-norm-relu, conv-norm-relu
    head: global average pool, linear

Norm layers strictly after the cut are the *bankable* ones whose affine
parameters get swapped per condition.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import container
from .core import SGD, Parameter, Tensor, backward, ops
from .errors import ConfigError, DataError, DimensionError, NonFiniteError

log = logging.getLogger(__name__)

SCOPES = ("after-cut", "all-layers")


@dataclass
class ModelConfig:
    input_size: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 4
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    norm_kind: str = "batch"
    groups: int = 4
    eps: float = 1e-5
    norm_momentum: float = 0.1

    def validate(self) -> None:
        if not self.widths:
            raise ConfigError("channel width list is empty")
        if any(w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be positive: {self.widths}")
        if self.norm_kind not in ("batch", "group"):
            raise ConfigError(f"norm_kind must be 'batch' or 'group', got {self.norm_kind!r}")
        if self.norm_kind == "group" and any(w % self.groups for w in self.widths):
            raise ConfigError(f"widths {self.widths} not divisible into {self.groups} groups")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        c, h, w = self.input_size
        # every 2x2 pooling stage needs an even extent; the deepest map must be >= 1 pixel
        for _ in self.widths[1:]:
            if h < 2 or w < 2 or h % 2 or w % 2:
                raise ConfigError(
                    f"input size {self.input_size} too small or odd for {len(self.widths) - 1} downsampling stages"
                )
            h, w = h // 2, w // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)


@dataclass
class TrainSchedule:
    initial_lr: float = 0.01
    batch_size: int = 16
    eval_batch_size: int = 8
    lr_decay_factor: float = 3.0
    patience_epochs: int = 5
    max_lr_drops: int = 3
    max_epochs: int = 40
    momentum: float = 0.9
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.initial_lr <= 0 or self.batch_size <= 0 or self.eval_batch_size <= 0:
            raise ConfigError("learning rate and batch sizes must be positive")
        if self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must exceed 1")
        if self.patience_epochs <= 0 or self.max_lr_drops <= 0 or self.max_epochs < 0:
            raise ConfigError("patience and max_lr_drops must be positive, max_epochs non-negative")


# --------------------------------------------------------------------------- layers


class Conv:
    def __init__(self, name: str, cin: int, cout: int, stride: int, rng: np.random.Generator, k: int = 3):
        self.name = name
        self.stride = stride
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Parameter(f"{name}.weight", Tensor(rng.normal(0.0, std, (cout, cin, k, k))))
        self.bias = Parameter(f"{name}.bias", Tensor(np.zeros(cout)))

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.conv2d(x, self.weight.tensor, self.bias.tensor, self.stride, self.weight.data.shape[-1] // 2)


class Norm:
    """Normalization with per-channel affine; batch kind keeps EMA running statistics."""

    def __init__(self, name: str, channels: int, kind: str, eps: float, momentum: float, groups: int):
        self.name = name
        self.kind = kind
        self.eps = eps
        self.momentum = momentum
        self.groups = groups
        self.gamma = Parameter(f"{name}.gamma", Tensor(np.ones(channels)))
        self.beta = Parameter(f"{name}.beta", Tensor(np.zeros(channels)))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    def params(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self.kind == "group":
            return ops.group_norm(x, self.gamma.tensor, self.beta.tensor, self.groups, self.eps)
        if training:
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * x.data.mean(axis=(0, 2, 3))).astype(np.float32)
            self.running_var = ((1 - m) * self.running_var + m * x.data.var(axis=(0, 2, 3))).astype(np.float32)
            return ops.norm_forward(x, self.gamma.tensor, self.beta.tensor, "batch", eps=self.eps)
        return ops.norm_forward(
            x, self.gamma.tensor, self.beta.tensor, "frozen", self.running_mean, self.running_var, self.eps
        )


class MaxPool:
    def __init__(self, name: str, size: int = 2):
        self.name = name
        self.size = size

    def params(self) -> list[Parameter]:
        return []

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.max_pool2d(x, self.size)


class ReLU:
    def __init__(self, name: str):
        self.name = name

    def params(self) -> list[Parameter]:
        return []

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.relu(x)


class Head:
    """Global average pool followed by a linear classifier."""

    def __init__(self, name: str, cin: int, num_classes: int, rng: np.random.Generator):
        self.name = name
        std = np.sqrt(1.0 / cin)
        self.weight = Parameter(f"{name}.weight", Tensor(rng.normal(0.0, std, (num_classes, cin))))
        self.bias = Parameter(f"{name}.bias", Tensor(np.zeros(num_classes)))

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.linear(ops.global_avg_pool(x), self.weight.tensor, self.bias.tensor)


# --------------------------------------------------------------------------- model


class Model:
    def __init__(self, config: ModelConfig, layers: list, cut_index: int):
        self.config = config
        self.layers = layers
        self.cut_index = cut_index
        self.training = False
        self.shallow_calls = 0

    # -- parameter views

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def norm_layers(self) -> list[Norm]:
        return [layer for layer in self.layers if isinstance(layer, Norm)]

    def bankable_norms(self, scope: str = "after-cut") -> list[Norm]:
        if scope not in SCOPES:
            raise ConfigError(f"unknown swap scope {scope!r}")
        if scope == "all-layers":
            return self.norm_layers()
        return [layer for i, layer in enumerate(self.layers) if isinstance(layer, Norm) and i > self.cut_index]

    def affine_names(self) -> set[str]:
        return {p.name for n in self.norm_layers() for p in n.params()}

    def set_trainable(self, names: Optional[Iterable[str]]) -> None:
        """Make exactly ``names`` trainable (all parameters when ``names`` is None)."""
        keep = None if names is None else set(names)
        for p in self.parameters():
            p.trainable = keep is None or p.name in keep

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    # -- forward

    def _as_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        c, h, w = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise DimensionError(f"expected input of shape (N, {c}, {h}, {w}), got {x.shape}")
        return x

    def _run(self, layers, x: Tensor, taps: Optional[dict]) -> Tensor:
        for layer in layers:
            x = layer(x, self.training)
            if taps is not None and isinstance(layer, Norm):
                taps[layer.name] = x
        return x

    def forward_shallow(self, x, taps: Optional[dict] = None) -> Tensor:
        self.shallow_calls += 1
        return self._run(self.layers[: self.cut_index + 1], self._as_input(x), taps)

    def forward_deep(self, features: Tensor, taps: Optional[dict] = None) -> Tensor:
        if not isinstance(features, Tensor):
            features = Tensor(features)
        out = self._run(self.layers[self.cut_index + 1:], features, taps)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("non-finite logits")
        return out

    def forward(self, x, taps: Optional[dict] = None) -> Tensor:
        return self.forward_deep(self.forward_shallow(x, taps), taps)

    __call__ = forward

    # -- state

    def affine_state(self, scope: str = "all-layers") -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {n.name: (n.gamma.data.copy(), n.beta.data.copy()) for n in self.bankable_norms(scope)}

    def load_affine(self, state: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        norms = {n.name: n for n in self.norm_layers()}
        for name, (g, b) in state.items():
            n = norms[name]
            if g.shape != n.gamma.data.shape or b.shape != n.beta.data.shape:
                raise DimensionError(f"affine shape mismatch for {name}: {g.shape} vs {n.gamma.data.shape}")
            n.gamma.tensor.data[...] = g
            n.beta.tensor.data[...] = b

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {p.name: p.data for p in self.parameters()}
        for n in self.norm_layers():
            arrays[f"{n.name}.running_mean"] = n.running_mean
            arrays[f"{n.name}.running_var"] = n.running_var
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            if name not in arrays:
                raise DataError(f"missing parameter {name}")
            if arrays[name].shape != p.data.shape:
                raise DimensionError(f"{name}: stored {arrays[name].shape} vs model {p.data.shape}")
            p.tensor.data = np.array(arrays[name], dtype=p.data.dtype)
        for n in self.norm_layers():
            n.running_mean = np.array(arrays[f"{n.name}.running_mean"], dtype=np.float32)
            n.running_var = np.array(arrays[f"{n.name}.running_var"], dtype=np.float32)

    def backbone_checksum(self) -> str:
        """sha256 over everything except norm affine parameters, including frozen statistics."""
        affine = self.affine_names()
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name, arr in sorted(self.state_arrays().items()):
            if name in affine:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def clone(self) -> "Model":
        return copy.deepcopy(self)


def build_model(config: ModelConfig | None = None, seed: int = 0) -> Model:
    config = config or ModelConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    c_in = config.input_size[0]
    w0 = config.widths[0]

    def norm(name, ch):
        return Norm(name, ch, config.norm_kind, config.eps, config.norm_momentum, config.groups)

    layers: list = [
        Conv("block1.conv1", c_in, w0, 1, rng), norm("block1.norm1", w0), ReLU("block1.relu1"),
        Conv("block1.conv2", w0, w0, 1, rng), norm("block1.norm2", w0), ReLU("block1.relu2"),
        Conv("block1.conv3", w0, w0, 1, rng), ReLU("block1.relu3"),
    ]
    cut = len(layers) - 1
    prev = w0
    for b, width in enumerate(config.widths[1:], start=2):
        layers += [
            MaxPool(f"block{b}.pool"),
            Conv(f"block{b}.conv1", prev, width, 1, rng), norm(f"block{b}.norm1", width), ReLU(f"block{b}.relu1"),
            Conv(f"block{b}.conv2", width, width, 1, rng), norm(f"block{b}.norm2", width), ReLU(f"block{b}.relu2"),
        ]
        prev = width
    layers.append(Head("head", prev, config.num_classes, rng))
    return Model(config, layers, cut)


def affine_fraction(model: Model) -> float:
    affine = model.affine_names()
    params = model.parameters()
    return sum(p.data.size for p in params if p.name in affine) / sum(p.data.size for p in params)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: Model, path) -> int:
    meta = {"config": model.config.to_dict(), "cut_index": model.cut_index, "checksum": model.backbone_checksum()}
    return container.write(path, "checkpoint", model.state_arrays(), meta)


def load_checkpoint(path) -> Model:
    arrays, meta = container.read(path, "checkpoint")
    model = build_model(ModelConfig.from_dict(meta["config"]), seed=0)
    model.load_state_arrays(arrays)
    if model.backbone_checksum() != meta["checksum"]:
        from .errors import ChecksumMismatchError
        raise ChecksumMismatchError(f"checkpoint {path} does not match its recorded checksum")
    return model


def checkpoint_payload_bytes(model: Model) -> int:
    return container.payload_bytes(model.state_arrays())


# --------------------------------------------------------------------------- training


def predict(model: Model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Inference-mode logits, computed in fixed-size batches."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model.forward(images[i:i + batch_size]).data)
    model.training = was_training
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes), np.float32)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 8) -> float:
    return float((predict(model, images, batch_size).argmax(axis=1) == labels).mean())


def train_epoch(model: Model, opt: SGD, images: np.ndarray, labels: np.ndarray, batch_size: int,
                rng: np.random.Generator) -> float:
    """One supervised pass in training mode (batch statistics, EMA updates)."""
    model.train()
    order = rng.permutation(len(images))
    losses = []
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        if len(idx) < 2:
            continue
        loss = ops.softmax_cross_entropy(model.forward(images[idx]), labels[idx])
        backward(loss)
        opt.step()
        losses.append(loss.item())
    model.eval()
    return float(np.mean(losses)) if losses else float("nan")


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    seed: int = 0
    stopped_reason: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def split_train_val(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def fit_early_stopping(model: Model, images: np.ndarray, labels: np.ndarray, schedule: TrainSchedule,
                       seed: int, val: Optional[tuple[np.ndarray, np.ndarray]] = None) -> TrainingLog:
    """Supervised training of all parameters with the plateau-decay schedule.

    The learning rate is divided by ``lr_decay_factor`` whenever validation
    error fails to improve for ``patience_epochs`` epochs; training stops
    after ``max_lr_drops`` such drops (or ``max_epochs``). The final weights
    are kept.
    """
    schedule.validate()
    tlog = TrainingLog(seed=seed)
    if schedule.max_epochs == 0:
        tlog.stopped_reason = "zero-epoch schedule"
        return tlog
    if len(images) == 0:
        raise DataError("empty training set")
    if val is None:
        tr, va = split_train_val(len(images), schedule.val_fraction, seed)
        if len(va) == 0:
            raise DataError("validation split is empty")
        val = (images[va], labels[va])
        images, labels = images[tr], labels[tr]
    elif len(val[0]) == 0:
        raise DataError("validation split is empty")
    rng = np.random.default_rng(seed + 1)
    model.set_trainable(None)
    lr = schedule.initial_lr
    opt = SGD(model.parameters(), lr, schedule.momentum)
    best_err, bad, drops = np.inf, 0, 0
    for epoch in range(schedule.max_epochs):
        loss = train_epoch(model, opt, images, labels, schedule.batch_size, rng)
        val_err = 1.0 - accuracy(model, val[0], val[1], schedule.eval_batch_size)
        tlog.epochs.append({"epoch": epoch, "loss": loss, "val_error": val_err, "lr": lr})
        log.info("epoch %d loss %.4f val_err %.4f lr %.5f", epoch, loss, val_err, lr)
        if val_err < best_err:
            best_err, bad = val_err, 0
            continue
        bad += 1
        if bad >= schedule.patience_epochs:
            drops += 1
            bad = 0
            if drops >= schedule.max_lr_drops:
                tlog.stopped_reason = f"{drops} learning-rate drops"
                break
            lr /= schedule.lr_decay_factor
            opt.lr = lr
    else:
        tlog.stopped_reason = "max_epochs reached"
    model.set_trainable([])
    model.eval()
    return tlog


def pretrain_clear(model: Model, clear_dataset, schedule: TrainSchedule | None = None, seed: int = 0) -> TrainingLog:
    """Supervised pre-training on clear-condition data; leaves the model frozen in inference mode."""
    schedule = schedule or TrainSchedule()
    if len(clear_dataset.images) == 0:
        raise DataError("empty clear dataset")
    return fit_early_stopping(model, clear_dataset.images, clear_dataset.require_labels("pre-training"), schedule, seed)
