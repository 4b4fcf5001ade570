from __future__ import annotations

import numpy as np
import pytest

from pivotcascade import autodiff as ad

from toy_pipeline import make_toy, train_cached

# calibrated update counts for the toy models
P2T_UPDATES = 2000
NAT_UPDATES = 1500
AR_UPDATES = 2000
P2T_UPDATES_MULTI = 2500
NAT_UPDATES_MULTI = 2000

_CRITERIA: dict[str, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    cid, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _CRITERIA[cid] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: (len(c), c)):
        title, status, detail = _CRITERIA[cid]
        terminalreporter.write_line(f"criterion {cid} [{status}] {title}" + (f" :: {detail}" if detail else ""))


@pytest.fixture
def detail(request):
    """Attach a human-readable measurement to the criterion summary line."""
    def add(text: str) -> None:
        request.node.user_properties.append(("detail", text))
        print(text)
    return add


@pytest.fixture
def float64():
    with ad.default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def toy():
    """Single-register task: src -> piv is a function."""
    return make_toy(pivot_variants=1)


@pytest.fixture(scope="session")
def toy_multi():
    """Two-register task: the pivot of a source sentence is ambiguous."""
    return make_toy(pivot_variants=2, vocab_per_lang=12)


@pytest.fixture(scope="session")
def p2t(toy):
    return train_cached(toy, "p2t", "ar", P2T_UPDATES)


@pytest.fixture(scope="session")
def s2p_nat(toy):
    return train_cached(toy, "s2p", "nat", NAT_UPDATES)


@pytest.fixture(scope="session")
def s2p_ar(toy):
    return train_cached(toy, "s2p", "ar", AR_UPDATES)
