"""Clear-condition activation statistics and the statistic-matching alignment loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import container
from .core import Tensor, ops
from .errors import ChecksumMismatchError, DataError, DimensionError
from .model import Model


class Welford:
    """Per-element streaming mean and population variance.

    Batches are folded in with the pairwise (Chan et al.) update, so feeding
    one sample at a time reduces to the classic Welford recurrence and
    independently accumulated shards can be combined with :meth:`merge`.
    """

    def __init__(self, shape: tuple[int, ...] = ()):
        self.n = 0
        self.mean = np.zeros(shape, dtype=np.float64)
        self.m2 = np.zeros(shape, dtype=np.float64)

    def update(self, x) -> None:
        """Add one sample (shape equal to the tracked shape)."""
        self.update_batch(np.asarray(x, dtype=np.float64)[None])

    def update_batch(self, xs) -> None:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.shape[1:] != self.mean.shape:
            raise DimensionError(f"sample shape {xs.shape[1:]} differs from tracked shape {self.mean.shape}")
        nb = xs.shape[0]
        if nb == 0:
            return
        mean_b = xs.mean(axis=0)
        m2_b = ((xs - mean_b) ** 2).sum(axis=0)
        self._combine(nb, mean_b, m2_b)

    def merge(self, other: "Welford") -> None:
        if other.n:
            self._combine(other.n, other.mean, other.m2)

    def _combine(self, nb, mean_b, m2_b) -> None:
        na = self.n
        n = na + nb
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2_b + delta * delta * (na * nb / n)
        self.n = n

    @property
    def variance(self) -> np.ndarray:
        if self.n == 0:
            raise DataError("no samples accumulated")
        return np.maximum(self.m2 / self.n, 0.0)


@dataclass
class ActivationStats:
    """Per-element mean/variance of norm-layer outputs, keyed by layer name."""

    layers: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    count: int = 0
    checksum: str = ""

    def layer_names(self) -> list[str]:
        return list(self.layers)


def collect_clear_stats(model: Model, images: np.ndarray, batch_size: int = 64,
                        scope: str = "all-layers") -> ActivationStats:
    """Stream the clear training images once and accumulate statistics at each norm output in ``scope``.

    The default scope covers every norm layer, which serves both the
    after-cut and the all-layers adaptation modes.
    """
    if len(images) == 0:
        raise DataError("cannot collect statistics from zero images")
    expected = tuple(model.config.input_size)
    if tuple(images.shape[1:]) != expected:
        raise DimensionError(f"image shape {images.shape[1:]} differs from configured input size {expected}")
    names = [n.name for n in model.bankable_norms(scope)]
    was_training = model.training
    model.eval()
    accs: dict[str, Welford] = {}
    for i in range(0, len(images), batch_size):
        taps: dict[str, Tensor] = {}
        model.forward(images[i:i + batch_size], taps)
        for name in names:
            act = taps[name].data
            if name not in accs:
                accs[name] = Welford(act.shape[1:])
            accs[name].update_batch(act)
    model.training = was_training
    layers = {
        name: (acc.mean.astype(np.float32), acc.variance.astype(np.float32)) for name, acc in accs.items()
    }
    return ActivationStats(layers, len(images), model.backbone_checksum())


def layer_losses(model: Model, batch, stats: ActivationStats, scope: str = "after-cut",
                 taps: Optional[dict] = None) -> dict[str, Tensor]:
    """Per-layer ``mean|mu_batch - mu_clear| + mean|var_batch - var_clear|`` terms."""
    if len(batch) < 2:
        raise DataError("alignment loss needs a batch of at least 2 images")
    if stats.checksum and stats.checksum != model.backbone_checksum():
        raise ChecksumMismatchError("activation statistics were collected on a different backbone")
    names = [n.name for n in model.bankable_norms(scope)]
    missing = [n for n in names if n not in stats.layers]
    if missing:
        raise DataError(f"layer set mismatch: statistics lack {missing}")
    if taps is None:
        taps = {}
    model.forward(batch, taps)
    out = {}
    for name in names:
        act = taps[name]
        mu_hat, var_hat = stats.layers[name]
        if act.shape[1:] != mu_hat.shape:
            raise DimensionError(f"{name}: activation {act.shape[1:]} vs stored {mu_hat.shape}")
        mean_term = ops.mean(ops.abs(ops.sub(ops.batch_mean(act), mu_hat)))
        var_term = ops.mean(ops.abs(ops.sub(ops.batch_var(act), var_hat)))
        out[name] = ops.add(mean_term, var_term)
    return out


def alignment_loss(model: Model, batch, stats: ActivationStats, scope: str = "after-cut",
                   taps: Optional[dict] = None) -> Tensor:
    """Sum over layers in ``scope`` of the element-wise L1 distance between batch and clear statistics."""
    terms = list(layer_losses(model, batch, stats, scope, taps).values())
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total


def save_stats(stats: ActivationStats, path) -> int:
    arrays = {}
    for name, (mu, var) in stats.layers.items():
        arrays[f"{name}.mean"] = mu
        arrays[f"{name}.var"] = var
    meta = {"count": stats.count, "checksum": stats.checksum, "layers": list(stats.layers)}
    return container.write(path, "activation-stats", arrays, meta)


def load_stats(path) -> ActivationStats:
    arrays, meta = container.read(path, "activation-stats")
    layers = {name: (arrays[f"{name}.mean"], arrays[f"{name}.var"]) for name in meta["layers"]}
    return ActivationStats(layers, meta["count"], meta["checksum"])
