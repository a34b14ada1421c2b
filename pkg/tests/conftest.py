import json

import numpy as np
import pytest
from hypothesis import settings

from promptmix.backends import MockBackend
from promptmix.data import AttributeSpec, DatasetSchema, SeedExample

# wall-clock deadlines make property tests flaky on a loaded machine
settings.register_profile("default", deadline=None)
settings.load_profile("default")

ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    criterion = dict(report.user_properties).get("criterion")
    if criterion is None:
        return
    title = dict(report.user_properties).get("criterion_title", "")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = ACCEPTANCE_RESULTS.get(criterion)
        # one failing test marks the criterion failed
        if prev is None or prev[0] == "PASS":
            ACCEPTANCE_RESULTS[criterion] = ("PASS" if report.outcome == "passed" else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE_RESULTS):
        status, title = ACCEPTANCE_RESULTS[criterion]
        terminalreporter.write_line(f"criterion {criterion:2d}: {status}  {title}")


@pytest.fixture
def criterion(record_property):
    def mark(number: int, title: str):
        record_property("criterion", number)
        record_property("criterion_title", title)

    return mark


@pytest.fixture(scope="session")
def backend():
    return MockBackend(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_schema(task_kind="multi-intent", filler_words=()):
    ontology = (
        AttributeSpec("music", "music", "play a song or some music or a tune", "assistant"),
        AttributeSpec("volume", "volume", "volume up or louder or blast", "assistant"),
        AttributeSpec("weather", "weather", "weather or forecast or rain", "assistant"),
        AttributeSpec("alarm", "alarm", "set an alarm or a timer to wake", "assistant"),
        AttributeSpec("hotel", "hotel", "a hotel room or suite for a stay", "hotels"),
    )
    return DatasetSchema(task_kind, ontology, frozenset({"hotels"}), "assistant", tuple(filler_words))


@pytest.fixture
def schema():
    return make_schema()


def seed_examples():
    rows = [
        ("e0", "play the song now", ("music",), (("artist", "queen"),)),
        ("e1", "volume up please", ("volume",), ()),
        ("e2", "weather for me", ("weather",), ()),
        ("e3", "play music and volume up", ("music", "volume"), ()),
        ("e4", "weather and an alarm", ("alarm", "weather"), ()),
        ("e5", "play a tune", ("music",), ()),
        ("e6", "set the alarm", ("alarm",), (("time", "seven"),)),
        ("e7", "the forecast with music", ("music", "weather"), ()),
        ("e8", "louder please", ("volume",), ()),
        ("e9", "wake me with a song", ("alarm", "music"), ()),
    ]
    return [SeedExample(i, u, a, s, "assistant", "target-train") for i, u, a, s in rows]


@pytest.fixture
def seeds():
    return seed_examples()


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x`` (perturbs a copy)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)
