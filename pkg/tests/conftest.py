from __future__ import annotations

import numpy as np
import pytest

from clipstop.data import SynthConfig, generate_synthetic

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    if rep.failed:
        entry["ok"] = False
    if rep.when == "call":
        entry["details"].extend(str(v) for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"[{status}] criterion {n}: {e['title']}" + (f" ({detail})" if detail else ""))


@pytest.fixture(scope="session")
def small_manifest():
    return generate_synthetic(SynthConfig(D=4, n_studies=24, seed=3, clips_per_view={"A4C": [1, 3], "PLAX": [0, 2], "PSAX": [0, 2]}))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
