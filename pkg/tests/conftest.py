from __future__ import annotations

import json

import pytest

from helpers import DATA, TEST_DATA
from kgenrich.agents.entities import EntityDictionary
from kgenrich.graph import KnowledgeGraph
from kgenrich.protocol import AuditLog, load_catalog

ACCEPTANCE = {
    1: "golden end-to-end run is byte-identical across repeats and worker counts",
    2: "reference agent replies parse, validate and round-trip",
    3: "evaluator sigmoid math, inclusive threshold and monotonicity",
    4: "nearest-entity lookup equals exhaustive scan",
    5: "metrics equal brute-force recomputation on random graphs",
    6: "ablation direction for conflict resolution and evaluator",
    7: "parser survives fuzzing with one audit record per failure",
    8: "token accounting is conserved and the cost command matches",
    9: "review export/import is a no-op and idempotent",
}
_results: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): test backs numbered acceptance criterion n")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    n = getattr(report, "acceptance", None)
    if n is not None:
        _results.setdefault(n, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().acceptance = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        outcomes = _results.get(n)
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} - {ACCEPTANCE[n]}")


@pytest.fixture(scope="session")
def catalog():
    return load_catalog()


@pytest.fixture
def audit():
    return AuditLog("test-doc")


@pytest.fixture(scope="session")
def reference_replies() -> dict[str, str]:
    d = json.loads((TEST_DATA / "reference_replies.json").read_text(encoding="utf-8"))
    d.pop("_note")
    return d


@pytest.fixture
def seed_graph() -> KnowledgeGraph:
    return KnowledgeGraph.load(DATA / "seed_kg.jsonl")


@pytest.fixture(scope="session")
def dictionary() -> EntityDictionary:
    return EntityDictionary.load(DATA / "dictionary.jsonl")
