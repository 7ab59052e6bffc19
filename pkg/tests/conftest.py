import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            n, title = mark.args
            _criteria.setdefault(n, {"title": title, "tests": {}})["tests"][item.nodeid] = None


def pytest_runtest_logreport(report):
    for entry in _criteria.values():
        if report.nodeid in entry["tests"]:
            ok = not report.failed and not (report.when == "call" and report.skipped)
            prev = entry["tests"][report.nodeid]
            entry["tests"][report.nodeid] = ok if prev is None else (prev and ok)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        entry = _criteria[n]
        results = list(entry["tests"].values())
        if any(r is None for r in results):
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {status:<7} {entry['title']}")
