"""Affine-only unsupervised adaptation and the per-condition memory bank."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import container
from .core import SGD, backward
from .errors import (ChecksumMismatchError, DataError, DimensionError, NonFiniteError, UnknownTaskError,
                     VersionMismatchError)
from .model import Model
from .stats import ActivationStats, layer_losses

log = logging.getLogger(__name__)

BANK_VERSION = 1
CLEAR = "clear"


@dataclass
class AffineEntry:
    task_id: str
    params: dict[str, tuple[np.ndarray, np.ndarray]]
    checksum: str
    meta: dict = field(default_factory=dict)

    def payload_bytes(self) -> int:
        return container.payload_bytes(self.arrays())

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"{k}.{suffix}": a for k, pair in self.params.items() for suffix, a in zip(("gamma", "beta"), pair)}

    def equals(self, other: "AffineEntry") -> bool:
        """Bitwise equality of the stored arrays."""
        if self.params.keys() != other.params.keys():
            return False
        return all(
            np.array_equal(a, b) and a.dtype == b.dtype
            for k in self.params
            for a, b in zip(self.params[k], other.params[k])
        )


def capture_entry(model: Model, task_id: str, scope: str = "after-cut", meta: Optional[dict] = None) -> AffineEntry:
    return AffineEntry(task_id, model.affine_state(scope), model.backbone_checksum(), dict(meta or {}, scope=scope))


class AffineBank:
    """Ordered map from task id to affine entry; the clear entry is always present."""

    def __init__(self, clear: AffineEntry, scope: str = "after-cut"):
        if clear.task_id != CLEAR:
            raise ValueError(f"the pristine entry must be named {CLEAR!r}")
        self.version = BANK_VERSION
        self.scope = scope
        self.entries: "OrderedDict[str, AffineEntry]" = OrderedDict([(CLEAR, clear)])

    @classmethod
    def from_model(cls, model: Model, scope: str = "after-cut") -> "AffineBank":
        return cls(capture_entry(model, CLEAR, scope), scope)

    @property
    def checksum(self) -> str:
        return self.entries[CLEAR].checksum

    @property
    def clear(self) -> AffineEntry:
        return self.entries[CLEAR]

    def task_ids(self) -> list[str]:
        return list(self.entries)

    def __contains__(self, task_id: str) -> bool:
        return task_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, entry: AffineEntry, overwrite: bool = False) -> None:
        if entry.checksum != self.checksum:
            raise ChecksumMismatchError(f"entry {entry.task_id!r} was adapted on a different backbone")
        if entry.params.keys() != self.clear.params.keys():
            raise DataError(f"entry {entry.task_id!r} layer set differs from the bank's")
        if entry.task_id in self.entries and not overwrite:
            raise KeyError(f"task {entry.task_id!r} already in bank; pass overwrite=True to replace it")
        self.entries[entry.task_id] = entry

    def get(self, task_id: str) -> AffineEntry:
        try:
            return self.entries[task_id]
        except KeyError:
            raise UnknownTaskError(f"no bank entry for task {task_id!r}") from None

    def subset(self, task_ids) -> "AffineBank":
        """A bank holding only ``task_ids`` (plus clear), sharing entry objects."""
        out = AffineBank(self.clear, self.scope)
        for t in task_ids:
            if t != CLEAR:
                out.entries[t] = self.get(t)
        return out


def plug_in(model: Model, entry: AffineEntry) -> None:
    """Overwrite the bankable affine parameters with ``entry``; nothing else is touched."""
    if entry.checksum != model.backbone_checksum():
        raise ChecksumMismatchError(f"entry {entry.task_id!r} does not belong to this model")
    model.load_affine(entry.params)


def restore_clear(model: Model, bank: AffineBank) -> None:
    plug_in(model, bank.clear)


def adapt_affine(
    model: Model,
    stats: ActivationStats,
    images: np.ndarray,
    task_id: str,
    lr: float = 0.01,
    momentum: float = 0.9,
    batch_size: int = 16,
    seed: int = 0,
    scope: str = "after-cut",
    clip: Optional[float] = 1.0,
) -> AffineEntry:
    """Adapt the scope's norm affine parameters for one epoch on unlabeled ``images``.

    Normalization uses the frozen clear statistics throughout. The model is
    returned to exactly the state it had on entry; the adapted parameters
    live only in the returned entry.
    """
    if len(images) < batch_size:
        raise DataError(f"need at least one full batch ({batch_size}) of images, got {len(images)}")
    norms = model.bankable_norms(scope)
    names = [p.name for n in norms for p in n.params()]
    saved_affine = model.affine_state("all-layers")
    saved_trainable = {p.name: p.trainable for p in model.parameters()}
    model.eval()
    model.set_trainable(names)
    opt = SGD([model.named_parameters()[n] for n in names], lr, momentum, clip=clip)
    order = np.random.default_rng(seed).permutation(len(images))
    trace = []
    try:
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < 2:
                break
            taps: dict = {}
            try:
                terms = layer_losses(model, images[idx], stats, scope, taps)
            except NonFiniteError as exc:
                raise NonFiniteError(f"{exc}; first offending layer: {_first_bad(taps)}") from exc
            loss = terms[next(iter(terms))]
            for key in list(terms)[1:]:
                loss = loss + terms[key]
            if not np.isfinite(loss.item()):
                bad = next((k for k, t in terms.items() if not np.isfinite(t.item())), _first_bad(taps))
                raise NonFiniteError(f"alignment loss became non-finite at step {len(trace)}; first offending layer: {bad}")
            backward(loss)
            opt.step()
            trace.append(loss.item())
        entry = capture_entry(model, task_id, scope, {
            "loss_trace": trace,
            "optimizer": {"name": "sgd", "lr": lr, "momentum": momentum, "clip": clip},
            "batch_size": batch_size,
            "seed": seed,
            "num_images": int(len(images)),
        })
    finally:
        model.load_affine(saved_affine)
        for p in model.parameters():
            p.trainable = saved_trainable[p.name]
    log.info("adapted %s: loss %.4f -> %.4f over %d steps", task_id, trace[0], trace[-1], len(trace))
    return entry


def _first_bad(taps: dict) -> str:
    for name, t in taps.items():
        if not np.all(np.isfinite(t.data)):
            return name
    return "<none found>"


def serialize_bank(bank: AffineBank, path) -> int:
    arrays = {}
    entries_meta = []
    for task_id, entry in bank.entries.items():
        for layer, (g, b) in entry.params.items():
            arrays[f"{task_id}/{layer}.gamma"] = g
            arrays[f"{task_id}/{layer}.beta"] = b
        entries_meta.append({"task_id": task_id, "checksum": entry.checksum, "layers": list(entry.params),
                             "meta": entry.meta})
    meta = {"bank_version": bank.version, "scope": bank.scope, "entries": entries_meta}
    return container.write(path, "affine-bank", arrays, meta)


def load_bank(path) -> AffineBank:
    """Read a bank; nothing is returned unless every check passes."""
    arrays, meta = container.read(path, "affine-bank")
    if meta.get("bank_version") != BANK_VERSION:
        raise VersionMismatchError(f"bank version {meta.get('bank_version')}, expected {BANK_VERSION}")
    entries = []
    for em in meta["entries"]:
        params = {}
        for layer in em["layers"]:
            g = arrays[f"{em['task_id']}/{layer}.gamma"]
            b = arrays[f"{em['task_id']}/{layer}.beta"]
            if g.shape != b.shape or g.ndim != 1:
                raise DimensionError(f"bad affine shapes for {em['task_id']}/{layer}")
            params[layer] = (g, b)
        entries.append(AffineEntry(em["task_id"], params, em["checksum"], em["meta"]))
    if not entries or entries[0].task_id != CLEAR:
        raise DataError("bank file has no clear entry")
    checksums = {e.checksum for e in entries}
    if len(checksums) != 1:
        raise ChecksumMismatchError(f"bank entries disagree on the backbone checksum: {sorted(checksums)}")
    bank = AffineBank(entries[0], meta["scope"])
    for e in entries[1:]:
        bank.insert(e)
    return bank
