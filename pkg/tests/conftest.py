import dataclasses
import re

import numpy as np
import pytest

from dilam.adapt import load_bank
from dilam.model import build_model
from dilam.pipeline import PipelineConfig, adapt_tasks, prepare, run_baseline, run_pipeline
from dilam.taskid import load_classifier
from helpers import frozen_hash, tiny_config


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=0)


@pytest.fixture
def tiny_images():
    return np.random.default_rng(0).uniform(0, 1, (40, 3, 8, 8)).astype(np.float32)


# --------------------------------------------------------------------------- default benchmark, built once


@pytest.fixture(scope="session")
def default_config():
    return PipelineConfig()


@pytest.fixture(scope="session")
def default_prepared(default_config):
    """The default workspace plus the frozen-part hash taken before any adaptation."""
    ws = prepare(default_config)
    return ws, frozen_hash(ws.model), ws.model.backbone_checksum()


@pytest.fixture(scope="session")
def default_ws(default_prepared):
    return default_prepared[0]


@pytest.fixture(scope="session")
def default_run(default_config, default_ws, tmp_path_factory):
    """Learned-mode pipeline with its artifacts: (report, bank, classifier, out_dir)."""
    out = tmp_path_factory.mktemp("default_run")
    report = run_pipeline(default_config, default_ws, out_dir=out)
    return report, load_bank(out / "bank.bin"), load_classifier(out / "taskid.ckpt"), out


@pytest.fixture(scope="session")
def oracle_run(default_config, default_ws):
    return run_pipeline(dataclasses.replace(default_config, task_id_mode="oracle"), default_ws)


@pytest.fixture(scope="session")
def all_layers_run(default_config, default_ws):
    cfg = dataclasses.replace(default_config, task_id_mode="oracle", swap_scope="all-layers")
    return run_pipeline(cfg, default_ws)


@pytest.fixture(scope="session")
def all_layers_bank(default_ws):
    return adapt_tasks(default_ws, "all-layers")


@pytest.fixture(scope="session")
def baselines(default_config, default_ws):
    """Lazily computed baseline reports keyed by name."""
    cache = {}

    def get(which):
        if which not in cache:
            cache[which] = run_baseline(default_config, which, default_ws)
        return cache[which]
    return get


# --------------------------------------------------------------------------- acceptance summary


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "xfailed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if not m or (rep.when != "call" and outcome != "error"):
                continue
            detail = dict(rep.user_properties).get("detail", "")
            rows[int(m.group(1))] = ("PASS" if outcome == "passed" else "FAIL", detail)
    if rows:
        terminalreporter.section("acceptance criteria")
        for n in sorted(rows):
            status, detail = rows[n]
            terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
