"""End-to-end orchestration: benchmark, pre-training, adaptation, task identification, evaluation."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .adapt import CLEAR, AffineBank, adapt_affine, plug_in, restore_clear
from .core import SGD
from .data import CONDITIONS, Dataset, Stream, StreamSpec, corrupt_dataset, generate_shapes, make_stream
from .errors import ConfigError, DataError, StageError
from .model import (SCOPES, Model, ModelConfig, TrainSchedule, build_model, checkpoint_payload_bytes,
                    pretrain_clear, train_epoch)
from .stats import ActivationStats, collect_clear_stats
from .taskid import TaskClassifier, VoteWindow, classify_frame, oracle_task_id, train_task_identifier

log = logging.getLogger(__name__)

TASK_ID_MODES = ("learned", "oracle")
BASELINES = ("none", "source-only", "fine-tuning", "joint")
DEFAULT_INTENSITIES = {"rain": 0.55, "fog": 0.8, "snow": 0.5}
FINE_TUNE_EPOCHS = 1


def stage_seed(master: int, stage: str) -> int:
    """Deterministic 31-bit seed for a named stage; independent of the order stages run in."""
    digest = hashlib.sha256(f"{master}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class AdaptConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    clip: Optional[float] = 1.0


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule(max_epochs=30))
    taskid_schedule: TrainSchedule = field(default_factory=TrainSchedule)
    task_order: list[str] = field(default_factory=lambda: list(CONDITIONS))
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    intensities: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    seed: int = 0
    train_per_class: int = 160
    test_per_class: int = 100
    task_id_mode: str = "learned"
    swap_scope: str = "after-cut"
    baseline: str = "none"
    joint_epochs: int = 2
    stream: Optional[list[tuple[str, int]]] = None

    def validate(self) -> None:
        self.model.validate()
        self.schedule.validate()
        self.taskid_schedule.validate()
        if not self.task_order or self.task_order[0] != CLEAR:
            raise ConfigError(f"task order must begin with {CLEAR!r}, got {self.task_order}")
        if len(set(self.task_order)) != len(self.task_order):
            raise ConfigError(f"task order repeats a task: {self.task_order}")
        for t in self.task_order:
            if t not in CONDITIONS:
                raise ConfigError(f"unknown task {t!r}; known conditions are {list(CONDITIONS)}")
            if t != CLEAR and t not in self.intensities:
                raise ConfigError(f"no corruption intensity for task {t!r}")
        for t, v in self.intensities.items():
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"intensity for {t!r} must be in [0, 1], got {v}")
        if self.task_id_mode not in TASK_ID_MODES:
            raise ConfigError(f"task_id_mode must be one of {TASK_ID_MODES}, got {self.task_id_mode!r}")
        if self.swap_scope not in SCOPES:
            raise ConfigError(f"swap_scope must be one of {SCOPES}, got {self.swap_scope!r}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("per-class image counts must be positive")
        if self.adapt.lr <= 0 or self.adapt.batch_size < 2:
            raise ConfigError("adaptation needs a positive lr and batch size >= 2")
        if self.train_per_class * self.model.num_classes < self.adapt.batch_size:
            raise ConfigError("training set smaller than one adaptation batch")
        if self.joint_epochs < 1:
            raise ConfigError("joint_epochs must be at least 1")
        if self.stream is not None:
            StreamSpec(self.stream)
            for cond, _ in self.stream:
                if cond not in self.task_order:
                    raise ConfigError(f"stream references unknown condition {cond!r}")

    @property
    def conditions(self) -> list[str]:
        """Known conditions in canonical order, independent of the task order."""
        return [c for c in CONDITIONS if c in self.task_order]

    def seeds(self) -> dict[str, int]:
        names = ["data.train", "data.test", "init", "pretrain", "taskid", "stream", "fine-tuning", "joint"]
        for c in self.conditions:
            if c != CLEAR:
                names += [f"corrupt.{c}.train", f"corrupt.{c}.test", f"adapt.{c}"]
        return {n: stage_seed(self.seed, n) for n in names}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        if self.stream is not None:
            d["stream"] = [list(s) for s in self.stream]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        d = dict(d)
        cfg = cls()
        if "model" in d:
            cfg.model = ModelConfig.from_dict(d.pop("model"))
        if "schedule" in d:
            cfg.schedule = TrainSchedule(**d.pop("schedule"))
        if "taskid_schedule" in d:
            cfg.taskid_schedule = TrainSchedule(**d.pop("taskid_schedule"))
        if "adapt" in d:
            cfg.adapt = AdaptConfig(**d.pop("adapt"))
        if d.get("stream") is not None:
            d["stream"] = [(str(c), int(n)) for c, n in d["stream"]]
        for k, v in d.items():
            if not hasattr(cfg, k):
                raise ConfigError(f"unknown config key {k!r}")
            setattr(cfg, k, v)
        return cfg


# --------------------------------------------------------------------------- benchmark


@dataclass
class Benchmark:
    train: dict[str, Dataset]
    test: dict[str, Dataset]


def build_benchmark(config: PipelineConfig) -> Benchmark:
    """Clear shapes plus one corrupted copy of the train and test sets per condition."""
    seeds = config.seeds()
    classes = config.model.num_classes
    size = config.model.input_size[1]
    clear_tr = generate_shapes(config.train_per_class, classes, size, seeds["data.train"])
    clear_te = generate_shapes(config.test_per_class, classes, size, seeds["data.test"])
    train, test = {CLEAR: clear_tr}, {CLEAR: clear_te}
    for c in config.conditions:
        if c == CLEAR:
            continue
        train[c] = corrupt_dataset(clear_tr, c, config.intensities[c], seeds[f"corrupt.{c}.train"])
        test[c] = corrupt_dataset(clear_te, c, config.intensities[c], seeds[f"corrupt.{c}.test"])
    return Benchmark(train, test)


# --------------------------------------------------------------------------- workspace


@dataclass
class Workspace:
    """Artifacts shared by every method: benchmark, clear model, clear statistics."""

    config: PipelineConfig
    benchmark: Benchmark
    model: Model
    stats: Optional[ActivationStats]
    pretrain_log: dict = field(default_factory=dict)
    runtime: dict[str, float] = field(default_factory=dict)


class Stage:
    """Context manager that times a stage and wraps failures with its name."""

    def __init__(self, name: str, runtime: dict):
        self.name, self.runtime = name, runtime

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s: start", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        self.runtime[self.name] = self.runtime.get(self.name, 0.0) + time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def prepare(config: PipelineConfig, model: Optional[Model] = None, stats: Optional[ActivationStats] = None,
            benchmark: Optional[Benchmark] = None) -> Workspace:
    """Build (or accept) the benchmark, the pre-trained clear model and its statistics."""
    config.validate()
    runtime: dict[str, float] = {}
    seeds = config.seeds()
    pre_log: dict = {}
    with Stage("benchmark", runtime):
        benchmark = benchmark or build_benchmark(config)
    if model is None:
        with Stage("pretrain", runtime):
            model = build_model(config.model, seeds["init"])
            pre_log = pretrain_clear(model, benchmark.train[CLEAR], config.schedule, seeds["pretrain"]).to_dict()
    if stats is None:
        with Stage("stats", runtime):
            stats = collect_clear_stats(model, benchmark.train[CLEAR].images, scope="all-layers")
    return Workspace(config, benchmark, model, stats, pre_log, runtime)


def _benchmark_key(cfg: PipelineConfig) -> tuple:
    return (cfg.seed, cfg.train_per_class, cfg.test_per_class, json.dumps(cfg.model.to_dict(), sort_keys=True),
            dataclasses.astuple(cfg.schedule), tuple(sorted(cfg.intensities.items())))


def _with_config(ws: Workspace, config: PipelineConfig) -> Workspace:
    """Reuse a workspace under a config that differs only in order, modes or adaptation settings."""
    config.validate()
    if _benchmark_key(ws.config) != _benchmark_key(config):
        raise ConfigError("workspace was built for a different benchmark, model or schedule")
    missing = set(config.task_order) - set(ws.benchmark.test)
    if missing:
        raise ConfigError(f"workspace has no data for tasks {sorted(missing)}")
    return dataclasses.replace(ws, config=config, runtime=dict(ws.runtime))


def write_artifacts(out: Path, ws: Workspace, bank: Optional[AffineBank],
                    classifier: Optional[TaskClassifier]) -> dict[str, int]:
    """Persist the model, statistics, bank and identifier; returns bytes written per file."""
    from .adapt import serialize_bank
    from .model import save_checkpoint
    from .stats import save_stats
    from .taskid import save_classifier
    out.mkdir(parents=True, exist_ok=True)
    sizes = {"model.ckpt": save_checkpoint(ws.model, out / "model.ckpt"),
             "stats.bin": save_stats(ws.stats, out / "stats.bin")}
    if bank is not None:
        sizes["bank.bin"] = serialize_bank(bank, out / "bank.bin")
    if classifier is not None:
        sizes["taskid.ckpt"] = save_classifier(classifier, out / "taskid.ckpt")
    return sizes


def adapt_tasks(ws: Workspace, scope: Optional[str] = None, order: Optional[Sequence[str]] = None) -> AffineBank:
    """Adapt every non-clear task in ``order`` into a fresh bank (clear restored before each)."""
    cfg = ws.config
    scope = scope or cfg.swap_scope
    seeds = cfg.seeds()
    bank = AffineBank.from_model(ws.model, scope)
    for task in order or cfg.task_order:
        if task == CLEAR:
            continue
        with Stage(f"adapt.{task}", ws.runtime):
            restore_clear(ws.model, bank)
            a = cfg.adapt
            entry = adapt_affine(ws.model, ws.stats, ws.benchmark.train[task].images, task, lr=a.lr,
                                 momentum=a.momentum, batch_size=a.batch_size, seed=seeds[f"adapt.{task}"],
                                 scope=scope, clip=a.clip)
            bank.insert(entry)
    restore_clear(ws.model, bank)
    return bank


def train_identifier(ws: Workspace) -> TaskClassifier:
    cfg = ws.config
    with Stage("train-taskid", ws.runtime):
        images = {c: ws.benchmark.train[c].images for c in cfg.conditions}
        return train_task_identifier(ws.model, images, cfg.taskid_schedule, cfg.seeds()["taskid"], cfg.conditions)


# --------------------------------------------------------------------------- evaluation


@dataclass
class TaskEval:
    accuracy: float
    routed: list[str]  # bank entry used per frame
    frame_ids: Optional[list[str]] = None  # per-frame classifier output (learned mode)
    voted_ids: Optional[list[str]] = None


def _route(votes: Sequence[str], bank: AffineBank) -> list[str]:
    # a vote for a task without an entry yet falls back to the clear parameters
    return [v if v in bank else CLEAR for v in votes]


def _votes(frame_ids: Sequence[str]) -> list[str]:
    window, out = VoteWindow(), []
    for f in frame_ids:
        window.push(f)
        out.append(window.vote())
    return out


def evaluate_task(model: Model, bank: AffineBank, dataset: Dataset, mode: str = "oracle",
                  classifier: Optional[TaskClassifier] = None, batch_size: int = 8) -> TaskEval:
    """Accuracy on one condition's test set, treated as a homogeneous frame sequence.

    In learned mode each frame's condition comes from the classifier on the
    shallow features, smoothed by the vote window; in oracle mode it comes
    from the dataset's condition tag. Frames routed to the same entry are run
    through the deep part in fixed-size chunks, so identical routing gives
    bitwise-identical predictions.
    """
    images, n = dataset.images, len(dataset)
    restore_clear(model, bank)
    model.eval()
    feats = [model.forward_shallow(images[i:i + batch_size]).data for i in range(0, n, batch_size)]
    features = np.concatenate(feats) if feats else np.zeros((0,))
    frame_ids = voted = None
    if mode == "oracle":
        routed = _route([oracle_task_id(dataset.condition)] * n, bank)
    elif mode == "learned":
        if classifier is None:
            raise ConfigError("learned task-id mode needs a classifier")
        idx = np.concatenate([np.atleast_1d(classify_frame(classifier, f)) for f in feats]) if feats else []
        frame_ids = [classifier.conditions[int(k)] for k in idx]
        voted = _votes(frame_ids)
        routed = _route(voted, bank)
    else:
        raise ConfigError(f"unknown task-id mode {mode!r}")
    routed_arr = np.array(routed)
    preds = np.empty(n, dtype=np.int64)
    all_layers = bank.scope == "all-layers"
    for tid in bank.task_ids():
        sel = np.flatnonzero(routed_arr == tid)
        if len(sel) == 0:
            continue
        plug_in(model, bank.get(tid))
        for i in range(0, len(sel), batch_size):
            chunk = sel[i:i + batch_size]
            # all-layers swaps block-1 affine too, so the shallow part is rerun (second pass)
            out = model.forward(images[chunk]) if all_layers else model.forward_deep(features[chunk])
            preds[chunk] = out.data.argmax(axis=1)
    restore_clear(model, bank)
    acc = float((preds == dataset.require_labels("evaluation")).mean()) if n else float("nan")
    return TaskEval(acc, routed, frame_ids, voted)


@dataclass
class EvalReport:
    method: str
    task_order: list[str]
    accuracy: list[list[Optional[float]]]  # [step][task], None until the task is seen
    summary: list[float]
    routing: list[list[Optional[dict]]] = field(default_factory=list)
    taskid: dict = field(default_factory=dict)
    stream: Optional[dict] = None
    runtime: dict[str, float] = field(default_factory=dict)
    bank: dict = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    model_hashes: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def task_accuracy(self, step: int, task: str) -> Optional[float]:
        """Accuracy of ``task`` after learning step ``step`` (1-based)."""
        return self.accuracy[step - 1][self.task_order.index(task)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(**dict(d))


def _triangular(order: Sequence[str], per_step: Callable[[int, list[str]], dict[str, TaskEval]]):
    acc, routing, summary = [], [], []
    for step in range(1, len(order) + 1):
        seen = list(order[:step])
        evals = per_step(step, seen)
        row = [evals[t].accuracy if t in evals else None for t in order]
        acc.append(row)
        routing.append([_counts(evals[t].routed) if t in evals else None for t in order])
        summary.append(float(np.mean([evals[t].accuracy for t in seen])))
    return acc, routing, summary


def _counts(ids: Sequence[str]) -> dict:
    out: dict[str, int] = {}
    for i in ids:
        out[i] = out.get(i, 0) + 1
    return dict(sorted(out.items()))


def taskid_confusion(ws: Workspace, classifier: TaskClassifier) -> dict:
    """Per-frame and windowed identification on each condition's test set."""
    conds = classifier.conditions
    confusion = np.zeros((len(conds), len(conds)), dtype=np.int64)
    per_frame, windowed = {}, {}
    bank = AffineBank.from_model(ws.model, "after-cut")
    for c in conds:
        ev = evaluate_task(ws.model, bank, ws.benchmark.test[c], "learned", classifier)
        for f in ev.frame_ids:
            confusion[conds.index(c), conds.index(f)] += 1
        per_frame[c] = float(np.mean([f == c for f in ev.frame_ids]))
        windowed[c] = float(np.mean([v == c for v in ev.voted_ids]))
    return {"conditions": list(conds), "confusion": confusion.tolist(), "per_frame_accuracy": per_frame,
            "windowed_accuracy": windowed}


def bank_stats(model: Model, bank: AffineBank) -> dict:
    ckpt = checkpoint_payload_bytes(model)
    entry = max(e.payload_bytes() for e in bank.entries.values())
    return {"entries": bank.task_ids(), "scope": bank.scope, "entry_payload_bytes": entry,
            "checkpoint_payload_bytes": ckpt, "payload_fraction": entry / ckpt}


def evaluate_dilam(ws: Workspace, bank: AffineBank, classifier: Optional[TaskClassifier], mode: str,
                   order: Optional[Sequence[str]] = None) -> EvalReport:
    """Fill the accuracy matrix: at step t the bank holds exactly the first t tasks' entries."""
    cfg = ws.config
    order = list(order or cfg.task_order)
    hashes = []

    def per_step(step, seen):
        sub = bank.subset(seen)
        hashes.append(ws.model.backbone_checksum())
        with Stage(f"eval.step{step}", ws.runtime):
            return {t: evaluate_task(ws.model, sub, ws.benchmark.test[t], mode, classifier,
                                     cfg.schedule.eval_batch_size) for t in seen}

    acc, routing, summary = _triangular(order, per_step)
    return EvalReport(f"dilam[{mode},{bank.scope}]", order, acc, summary, routing, runtime=dict(ws.runtime),
                      bank=bank_stats(ws.model, bank), seeds=cfg.seeds(), model_hashes=hashes,
                      config=cfg.to_dict())


def run_pipeline(config: PipelineConfig, workspace: Optional[Workspace] = None,
                 out_dir=None) -> EvalReport:
    """Pretrain, collect statistics, adapt each task into the bank, train the identifier, evaluate.

    With ``out_dir`` the artifacts and report files are written there.
    """
    ws = _with_config(workspace, config) if workspace is not None else prepare(config)
    bank = adapt_tasks(ws, config.swap_scope)
    classifier = train_identifier(ws) if config.task_id_mode == "learned" else None
    report = evaluate_dilam(ws, bank, classifier, config.task_id_mode)
    report.extra["pretrain"] = ws.pretrain_log
    if classifier is not None:
        with Stage("taskid-confusion", ws.runtime):
            report.taskid = taskid_confusion(ws, classifier)
    if config.stream:
        with Stage("stream", ws.runtime):
            stream = make_stream(StreamSpec(config.stream, config.seeds()["stream"]), ws.benchmark.test)
            report.stream = run_stream(ws.model, bank, stream, config.task_id_mode, classifier).to_dict()
    report.runtime = dict(ws.runtime)
    if out_dir is not None:
        write_artifacts(Path(out_dir), ws, bank, classifier)
        emit_report(report, out_dir)
    return report


# --------------------------------------------------------------------------- baselines


def _clear_only_eval(model: Model, ds: Dataset, batch_size: int) -> TaskEval:
    return evaluate_task(model, AffineBank.from_model(model, "after-cut"), ds, "oracle", None, batch_size)


def _supervised_union(ws: Workspace, tasks: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    sets = [ws.benchmark.train[t] for t in tasks]
    labels = [s.require_labels("joint training") for s in sets]
    return np.concatenate([s.images for s in sets]), np.concatenate(labels)


def run_baseline(config: PipelineConfig, which: str, workspace: Optional[Workspace] = None) -> EvalReport:
    """Source-only, sequential fine-tuning, or joint training, evaluated with the same protocol."""
    if which not in BASELINES[1:]:
        raise ConfigError(f"unknown baseline {which!r}")
    ws = _with_config(workspace, config) if workspace is not None else prepare(config)
    order = list(config.task_order)
    sched = config.schedule
    seeds = config.seeds()
    hashes: list[str] = []
    extra: dict = {}
    runtime: dict[str, float] = {}

    if which == "source-only":
        def per_step(step, seen):
            hashes.append(_full_hash(ws.model))
            return {t: _clear_only_eval(ws.model, ws.benchmark.test[t], sched.eval_batch_size) for t in seen}

    elif which == "fine-tuning":
        ft = ws.model.clone()
        ft.set_trainable(None)
        opt = SGD(ft.parameters(), sched.initial_lr, sched.momentum)
        rng = np.random.default_rng(seeds["fine-tuning"])
        epochs: dict[str, int] = {}

        def per_step(step, seen):
            task = seen[-1]
            if step > 1:
                with Stage(f"fine-tune.{task}", runtime):
                    ds = ws.benchmark.train[task]
                    for _ in range(FINE_TUNE_EPOCHS):
                        train_epoch(ft, opt, ds.images, ds.require_labels("fine-tuning"), sched.batch_size, rng)
                        epochs[task] = epochs.get(task, 0) + 1
            hashes.append(_full_hash(ft))
            return {t: _clear_only_eval(ft, ws.benchmark.test[t], sched.eval_batch_size) for t in seen}

        extra["epochs_per_task"] = epochs

    else:  # joint
        def per_step(step, seen):
            model = ws.model
            if step > 1:
                with Stage(f"joint.step{step}", runtime):
                    model = ws.model.clone()
                    model.set_trainable(None)
                    images, labels = _supervised_union(ws, seen)
                    opt = SGD(model.parameters(), sched.initial_lr, sched.momentum)
                    rng = np.random.default_rng([seeds["joint"], step])
                    for _ in range(config.joint_epochs):
                        train_epoch(model, opt, images, labels, sched.batch_size, rng)
                    model.set_trainable([])
            hashes.append(_full_hash(model))
            return {t: _clear_only_eval(model, ws.benchmark.test[t], sched.eval_batch_size) for t in seen}

        extra["epochs_per_step"] = config.joint_epochs

    acc, routing, summary = _triangular(order, per_step)
    return EvalReport(which, order, acc, summary, routing, runtime=runtime, seeds=seeds, model_hashes=hashes,
                      extra=extra, config=config.to_dict())


def _full_hash(model: Model) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.state_arrays().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- streams


@dataclass
class StreamReport:
    frame_ids: list[str]
    voted_ids: list[str]
    true_ids: list[str]
    predictions: list[int]
    per_frame_accuracy: float
    windowed_accuracy: float
    downstream_accuracy: float
    transition_latencies: list[Optional[int]]
    shallow_calls: int

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("frame_ids", "voted_ids", "true_ids", "predictions"):
            d.pop(k)
        d["frames"] = len(self.true_ids)
        return d


def transition_latencies(voted: Sequence[str], truth: Sequence[str]) -> list[Optional[int]]:
    """Frames from each condition change until the vote first equals the new condition.

    The first post-transition frame counts as 1; ``None`` if the vote never flips
    before the next change.
    """
    out: list[Optional[int]] = []
    changes = [i for i in range(1, len(truth)) if truth[i] != truth[i - 1]]
    for k, start in enumerate(changes):
        end = changes[k + 1] if k + 1 < len(changes) else len(truth)
        hit = next((j for j in range(start, end) if voted[j] == truth[start]), None)
        out.append(None if hit is None else hit - start + 1)
    return out


def run_stream(model: Model, bank: AffineBank, stream: Stream, mode: str = "learned",
               classifier: Optional[TaskClassifier] = None,
               frame_classifier: Optional[Callable[[np.ndarray], str]] = None) -> StreamReport:
    """Frame-by-frame plug-and-play inference over a condition-tagged stream.

    ``frame_classifier`` replaces the learned classifier with a function of the
    raw shallow feature map, e.g. to inject a perfect identifier.
    """
    for c in set(stream.conditions):
        if c not in CONDITIONS:
            raise DataError(f"stream references unknown condition {c!r}")
    if mode == "learned" and classifier is None and frame_classifier is None:
        raise ConfigError("learned task-id mode needs a classifier")
    model.eval()
    calls0 = model.shallow_calls
    window = VoteWindow()
    frame_ids, voted, preds = [], [], []
    current = None
    all_layers = bank.scope == "all-layers"
    for i in range(len(stream)):
        x = stream.images[i:i + 1]
        if all_layers and current != CLEAR:
            plug_in(model, bank.clear)
            current = CLEAR
        feats = model.forward_shallow(x)
        if mode == "oracle":
            fid = oracle_task_id(stream.conditions[i])
        elif frame_classifier is not None:
            fid = frame_classifier(feats.data)
        else:
            fid = classifier.conditions[classify_frame(classifier, feats.data[0])]
        # the sensor id is ground truth and bypasses the window
        if mode == "oracle":
            v = fid
        else:
            window.push(fid)
            v = window.vote()
        target = v if v in bank else CLEAR
        if target != current:
            plug_in(model, bank.get(target))
            current = target
        out = model.forward_deep(model.forward_shallow(x) if all_layers and target != CLEAR else feats)
        frame_ids.append(fid)
        voted.append(v)
        preds.append(int(out.data.argmax()))
    restore_clear(model, bank)
    truth = list(stream.conditions)
    n = max(len(truth), 1)
    return StreamReport(
        frame_ids, voted, truth, preds,
        per_frame_accuracy=sum(f == t for f, t in zip(frame_ids, truth)) / n,
        windowed_accuracy=sum(v == t for v, t in zip(voted, truth)) / n,
        downstream_accuracy=float(np.mean(np.array(preds) == stream.labels)) if len(truth) else float("nan"),
        transition_latencies=transition_latencies(voted, truth),
        shallow_calls=model.shallow_calls - calls0,
    )


# --------------------------------------------------------------------------- reports

CSV_FIELDS = ("method", "step", "task", "accuracy", "step_summary")


def emit_report(report: EvalReport, out_dir, formats: Sequence[str] = ("json", "csv")) -> list[Path]:
    """Write ``report.json`` and/or ``report.csv``; floats keep full precision."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create report directory {out}: {exc}") from exc
    written = []
    for fmt in formats:
        path = out / f"report.{fmt}"
        tmp = path.with_suffix(path.suffix + ".tmp")
        try:
            if fmt == "json":
                tmp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
            elif fmt == "csv":
                with open(tmp, "w", newline="") as f:
                    w = csv.writer(f)
                    w.writerow(CSV_FIELDS)
                    for step, row in enumerate(report.accuracy, 1):
                        for task, acc in zip(report.task_order, row):
                            if acc is not None:
                                w.writerow([report.method, step, task, repr(acc), repr(report.summary[step - 1])])
            else:
                raise ConfigError(f"unknown report format {fmt!r}")
            tmp.replace(path)
        except OSError as exc:
            raise ConfigError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
