import json
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from adasearch import io as aio
from adasearch.models import Classifier
from adasearch.tensor import GraphBuilder

DATA = Path(__file__).parent / "data"

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# acceptance criteria: one PASS/FAIL line each in the terminal summary
_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    out = yield
    rep = out.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or (rep.when != "call" and not rep.failed):
        return
    n, title = m.args
    entry = _CRITERIA.setdefault(n, [title, True])
    entry[1] = entry[1] and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture(scope="session")
def golden():
    return json.loads((DATA / "golden.json").read_text())


@pytest.fixture(scope="session")
def test_data():
    return aio.load_dataset(DATA / "test.bin")


@pytest.fixture(scope="session")
def train_data():
    return aio.load_dataset(DATA / "train.bin")


def _model(name):
    return aio.load_model(DATA / f"{name}.bin")


@pytest.fixture(scope="session")
def mlp():
    return _model("mlp")


@pytest.fixture(scope="session")
def quant():
    return _model("quant")


@pytest.fixture(scope="session")
def rs():
    return _model("rs")


@pytest.fixture(scope="session")
def noise():
    return _model("noise")


@pytest.fixture(scope="session")
def combo():
    return _model("combo")


@pytest.fixture(scope="session")
def full():
    return _model("full")


def random_graph(seed: int, kind: str = "mlp", k: int = 4, extra=()):
    """Small random differentiable graph; ``extra`` appends ops after the input."""
    rng = np.random.default_rng(seed)
    if kind == "cnn":
        b = GraphBuilder((1, 4, 4))
        h = "input"
        for op in extra:
            h = b.add(op, [h])
        h = b.add("conv2d", [h], params={"W": rng.normal(0, 0.5, (2, 1, 3, 3)), "b": rng.normal(0, 0.1, 2)})
        h = b.add("relu", [h])
        h = b.add("flatten", [h])
        logits = b.add("dense", [h], params={"W": rng.normal(0, 0.3, (k, 32)), "b": rng.normal(0, 0.1, k)})
    else:
        b = GraphBuilder((6,))
        h = "input"
        for op in extra:
            h = b.add(op, [h])
        h = b.add("dense", [h], params={"W": rng.normal(0, 0.7, (5, 6)), "b": rng.normal(0, 0.1, 5)})
        h = b.add("relu", [h])
        h2 = b.add("dense", [h], params={"W": rng.normal(0, 0.7, (5, 5)), "b": rng.normal(0, 0.1, 5)})
        h = b.add("add", [h, h2])
        logits = b.add("dense", [h], params={"W": rng.normal(0, 0.7, (k, 5)), "b": rng.normal(0, 0.1, k)})
    probs = b.add("softmax", [logits])
    return Classifier(b.build(logits, probs), k, name=f"random-{kind}-{seed}")


def random_input(model, seed: int):
    return np.random.default_rng(seed + 1000).uniform(0.05, 0.95, model.input_shape)
