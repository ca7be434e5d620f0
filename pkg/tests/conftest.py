import numpy as np
import pytest

from medconv.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr) -> Tensor:
    """64-bit leaf with gradient tracking, the setting used by finite differences."""
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, dtype=np.float64)


def away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# ---------------------------------------------------------------------------
# Acceptance summary: one pass/fail line per numbered criterion.

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "passed": 0, "failed": [], "notes": []})
    if hasattr(report, "wasxfail"):
        entry["failed"].append(f"{item.name} (expected: {report.wasxfail})")
    elif report.failed:
        entry["failed"].append(item.name)
    elif report.passed:
        entry["passed"] += 1
    for name, text in report.user_properties:
        if name == "note":
            entry["notes"].append(text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "FAIL" if e["failed"] else "PASS"
        total = e["passed"] + len(e["failed"])
        tr.write_line(f"criterion {number}: {status}  {e['title']} ({e['passed']}/{total} checks)")
        for name in e["failed"]:
            tr.write_line(f"    failed: {name}")
        for note in e["notes"]:
            for line in note.splitlines():
                tr.write_line(f"    {line}")
