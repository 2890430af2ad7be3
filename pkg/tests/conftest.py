import os
import re

import pytest

_RESULTS = []


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the long desk-scale reproduction criteria")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, title): acceptance criterion reported in the summary")


def slow_enabled(config) -> bool:
    return config.getoption("--runslow") or os.environ.get("DTI_RUN_SLOW", "") not in ("", "0")


def pytest_collection_modifyitems(config, items):
    if slow_enabled(config):
        return
    skip = pytest.mark.skip(reason="slow reproduction run; enable with --runslow or DTI_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def measured():
    """Dict a criterion test fills with the values it measured (shown in the summary)."""
    return {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = item.funcargs.get("measured") if hasattr(item, "funcargs") else None
        _RESULTS.append((marker.args[0], marker.args[1], status, detail or {}))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid, title, status, detail in sorted(_RESULTS, key=lambda r: _natural(r[0])):
        extra = "; ".join(f"{k}={_fmt(v)}" for k, v in detail.items())
        tr.write_line(f"[{status}] {cid} {title}" + (f" | {extra}" if extra else ""))


def _natural(cid):
    return [int(t) if t.isdigit() else t for t in re.findall(r"\d+|\D+", cid)]


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)
