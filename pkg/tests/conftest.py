import json
import time
from pathlib import Path

import numpy as np
import pytest

from d2c import cli
from d2c.config import PipelineConfig
from d2c.dynamics import SystemSpec, make_system
from d2c.policy import D2cPolicy
from d2c.task import CostSpec

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


class PipelineRun:
    """A completed ``d2c pipeline`` run directory plus handy loaded objects."""

    def __init__(self, path: Path, config: Path, seconds: float):
        self.path = path
        self.seconds = seconds
        self.cfg = PipelineConfig.load(config)
        self.system = self.cfg.system()
        self.cost = self.cfg.cost()
        self.policy = D2cPolicy.load(path / "policy.json", self.system)
        self.timings = json.loads((path / "timings.json").read_text())


def _run_pipeline(tmp_path_factory, name):
    out = tmp_path_factory.mktemp(f"run_{name}")
    config = CONFIGS / f"{name}.yaml"
    t0 = time.perf_counter()
    assert cli.main(["pipeline", "--config", str(config), "--out", str(out)]) == 0
    return PipelineRun(out, config, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def pendulum_run(tmp_path_factory):
    return _run_pipeline(tmp_path_factory, "pendulum")


@pytest.fixture(scope="session")
def cartpole_run(tmp_path_factory):
    return _run_pipeline(tmp_path_factory, "cartpole")


@pytest.fixture(scope="session")
def linear_run(tmp_path_factory):
    return _run_pipeline(tmp_path_factory, "linear")


@pytest.fixture
def linear_system():
    spec = SystemSpec("linear", 10, 0.1, {"A": [[1.0, 0.1], [0.0, 1.0]], "B": [[0.005], [0.1]]}, [1.0, 0.0])
    return make_system(spec)


@pytest.fixture
def linear_cost():
    return CostSpec(np.diag([1.0, 0.1]), 0.1, np.diag([10.0, 1.0]), [0.0, 0.0])


@pytest.fixture
def pendulum():
    return make_system(SystemSpec("pendulum", 30, 0.1, {}, [0.0, 0.0]))


@pytest.fixture
def cartpole():
    return make_system(SystemSpec("cartpole", 30, 0.1, {}, [0.0, 0.0, 0.0, 0.0]))


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
