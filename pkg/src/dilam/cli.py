"""Command-line harness: ``dilam <stage> --config FILE --out DIR [--set key=value ...]``.

Config files are flat ``key = value`` lines (``#`` comments allowed). Keys:

    seed, task_order, train_per_class, test_per_class, task_id_mode,
    swap_scope, baseline, joint_epochs, stream,
    intensity.<condition>, model.<field>, schedule.<field>,
    taskid_schedule.<field>, adapt.<field>

Lists are comma separated; ``stream`` is ``condition:frames,...``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from filelock import FileLock, Timeout

from .adapt import load_bank, serialize_bank
from .data import StreamSpec, make_stream
from .errors import ConfigError, DilamError, StageError
from .model import build_model, load_checkpoint, pretrain_clear, save_checkpoint
from .pipeline import (PipelineConfig, Workspace, Stage, adapt_tasks, build_benchmark, emit_report,
                       evaluate_dilam, load_report, prepare, run_baseline, run_stream, taskid_confusion,
                       train_identifier)
from .stats import collect_clear_stats, load_stats, save_stats
from .taskid import load_classifier, save_classifier

log = logging.getLogger("dilam")

LOCK_NAME = ".dilam.lock"
STALE_NAME = "STALE"
EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_LOCKED = 0, 1, 2, 3
_SECTION = "dilam"
_NESTED = ("model", "schedule", "taskid_schedule", "adapt")


# --------------------------------------------------------------------------- config parsing


def _coerce(raw: str, like: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float) or like is None and key == "adapt.clip":
            return None if raw.lower() == "none" else float(raw)
        if isinstance(like, (list, tuple)):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if like and isinstance(like[0], int):
                items = [int(s) for s in items]
            return type(like)(items)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw


def _parse_stream(raw: str) -> Optional[list[tuple[str, int]]]:
    if raw.strip().lower() in ("", "none"):
        return None
    out = []
    for part in raw.split(","):
        cond, _, n = part.strip().partition(":")
        if not n:
            raise ConfigError(f"stream segment {part!r} must be condition:frames")
        try:
            out.append((cond.strip(), int(n)))
        except ValueError:
            raise ConfigError(f"bad frame count in stream segment {part!r}") from None
    return out


def apply_setting(cfg: PipelineConfig, key: str, raw: str) -> None:
    key = key.strip().lower()
    head, _, tail = key.partition(".")
    if head == "intensity" and tail:
        cfg.intensities[tail] = _coerce(raw, 0.0, key)
    elif head in _NESTED and tail:
        target = getattr(cfg, head)
        if not hasattr(target, tail):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, tail, _coerce(raw, getattr(target, tail), key))
    elif key == "stream":
        cfg.stream = _parse_stream(raw)
    elif key in {f.name for f in dataclasses.fields(cfg)} and key not in _NESTED and key != "intensities":
        setattr(cfg, key, _coerce(raw, getattr(cfg, key), key))
    else:
        raise ConfigError(f"unknown config key {key!r}")


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> PipelineConfig:
    cfg = PipelineConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            parser.read_string(f"[{_SECTION}]\n{text}")
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for key, raw in parser.items(_SECTION):
            apply_setting(cfg, key, raw)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like key=value")
        apply_setting(cfg, key, raw)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------- stages


def _need(out: Path, name: str, producer: str) -> Path:
    path = out / name
    if not path.exists():
        raise ConfigError(f"{path} not found; run `dilam {producer}` first")
    return path


def _workspace(cfg: PipelineConfig, out: Path, with_stats: bool = True) -> Workspace:
    model = load_checkpoint(_need(out, "model.ckpt", "pretrain"))
    stats = load_stats(_need(out, "stats.bin", "stats")) if with_stats else None
    if stats is None:
        return Workspace(cfg, build_benchmark(cfg), model, None)
    return prepare(cfg, model=model, stats=stats)


def cmd_pretrain(cfg: PipelineConfig, out: Path, args) -> None:
    with Stage("pretrain", {}):
        bench = build_benchmark(cfg)
        seeds = cfg.seeds()
        model = build_model(cfg.model, seeds["init"])
        tlog = pretrain_clear(model, bench.train["clear"], cfg.schedule, seeds["pretrain"])
        save_checkpoint(model, out / "model.ckpt")
        (out / "pretrain.json").write_text(json.dumps(tlog.to_dict(), indent=2))


def cmd_stats(cfg: PipelineConfig, out: Path, args) -> None:
    with Stage("stats", {}):
        model = load_checkpoint(_need(out, "model.ckpt", "pretrain"))
        stats = collect_clear_stats(model, build_benchmark(cfg).train["clear"].images, scope="all-layers")
        save_stats(stats, out / "stats.bin")


def cmd_adapt(cfg: PipelineConfig, out: Path, args) -> None:
    ws = _workspace(cfg, out)
    bank = adapt_tasks(ws, cfg.swap_scope)
    serialize_bank(bank, out / "bank.bin")


def cmd_train_taskid(cfg: PipelineConfig, out: Path, args) -> None:
    ws = _workspace(cfg, out, with_stats=False)
    save_classifier(train_identifier(ws), out / "taskid.ckpt")


def cmd_eval(cfg: PipelineConfig, out: Path, args) -> None:
    ws = _workspace(cfg, out)
    if cfg.baseline != "none":
        report = run_baseline(cfg, cfg.baseline, ws)
    else:
        bank = load_bank(_need(out, "bank.bin", "adapt"))
        if bank.scope != cfg.swap_scope:
            raise ConfigError(f"bank.bin holds {bank.scope!r} entries but swap_scope is {cfg.swap_scope!r}")
        clf = load_classifier(_need(out, "taskid.ckpt", "train-taskid")) if cfg.task_id_mode == "learned" else None
        with Stage("eval", ws.runtime):
            report = evaluate_dilam(ws, bank, clf, cfg.task_id_mode)
            if clf is not None:
                report.taskid = taskid_confusion(ws, clf)
    emit_report(report, out)


def cmd_stream(cfg: PipelineConfig, out: Path, args) -> None:
    ws = _workspace(cfg, out, with_stats=False)
    bank = load_bank(_need(out, "bank.bin", "adapt"))
    clf = load_classifier(_need(out, "taskid.ckpt", "train-taskid")) if cfg.task_id_mode == "learned" else None
    segments = cfg.stream or [(c, 125) for c in cfg.task_order]
    with Stage("stream", {}):
        stream = make_stream(StreamSpec(segments, cfg.seeds()["stream"]), ws.benchmark.test)
        result = run_stream(ws.model, bank, stream, cfg.task_id_mode, clf).to_dict()
    (out / "stream.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    if (out / "report.json").exists():
        report = load_report(out / "report.json")
        report.stream = result
        emit_report(report, out)


def cmd_report(cfg: PipelineConfig, out: Path, args) -> None:
    report = load_report(_need(out, "report.json", "eval"))
    emit_report(report, out, [f.strip() for f in args.format.split(",") if f.strip()])


COMMANDS = {
    "pretrain": (cmd_pretrain, "train the clear-condition model"),
    "stats": (cmd_stats, "collect clear activation statistics"),
    "adapt": (cmd_adapt, "adapt affine parameters for each task into the bank"),
    "train-taskid": (cmd_train_taskid, "train the condition classifier"),
    "eval": (cmd_eval, "run the incremental evaluation protocol"),
    "stream": (cmd_stream, "simulate a frame stream with plug-and-play inference"),
    "report": (cmd_report, "re-emit report files from report.json"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dilam", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name == "report":
            p.add_argument("--format", default="json,csv", help="comma-separated formats (json, csv)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("DILAM_LOG_LEVEL", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    lock = FileLock(str(out / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        print(f"error: another dilam process holds {out / LOCK_NAME}", file=sys.stderr)
        return EXIT_LOCKED
    try:
        cfg = load_config(args.config, args.set)
        COMMANDS[args.command][0](cfg, out, args)
    except DilamError as exc:
        if isinstance(exc, StageError):
            (out / STALE_NAME).write_text(f"{args.command}: {exc}\n")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    finally:
        lock.release()
    (out / STALE_NAME).unlink(missing_ok=True)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
