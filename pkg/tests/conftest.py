"""Shared fixtures and the acceptance summary.

Tests marked ``@pytest.mark.criterion(n, title)`` are collected into one
PASS/FAIL line per criterion at the end of the run.
"""

import json
import time
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

_criteria = {}


def load_raw(name):
    return json.loads((CONFIGS / name).read_text())


@pytest.fixture
def raw_config():
    return load_raw


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "seconds": 0.0, "tests": 0})
    if rep.when == "call":
        entry["tests"] += 1
        entry["seconds"] += rep.duration
    if rep.failed or (rep.when == "call" and rep.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "PASS" if e["ok"] else "FAIL"
        tr.write_line(f"criterion {n}: {status}  {e['title']}  ({e['tests']} checks, {e['seconds']:.1f} s)")


class Stopwatch:
    def __init__(self):
        self.t0 = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.t0


@pytest.fixture
def stopwatch():
    return Stopwatch()
