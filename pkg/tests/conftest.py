from __future__ import annotations

import os

# the per-cluster linear algebra is small; BLAS threading only adds overhead
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from spfclust.graph import build_graph  # noqa: E402

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-scale simulation tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: full-scale runs taking hours; enable with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="full-scale run; use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number = dict(report.user_properties).get("criterion")
    if number is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    _CRITERIA[number] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")


@pytest.fixture
def criterion(request, record_property):
    """Tag a test with its acceptance criterion and collect a detail string."""
    marker = request.node.get_closest_marker("criterion")
    record_property("criterion", marker.args[0])

    def detail(text: str) -> None:
        record_property("detail", text)
        print(f"criterion {marker.args[0]}: {text}")

    return detail


def grid_graph(rows: int, cols: int):
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return build_graph(rows * cols, edges)


@pytest.fixture
def grid3():
    return grid_graph(3, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
