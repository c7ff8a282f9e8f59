import time

import pytest

from svc import autodiff as ad
from svc.audio_io import Waveform
from helpers import SR, overfit_run, sine


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture(autouse=True)
def _reset_precision():
    ad.set_precision("f32")
    ad.set_debug(False)
    yield
    ad.set_precision("f32")
    ad.set_debug(False)


@pytest.fixture
def f64():
    with ad.precision("f64"):
        yield


@pytest.fixture
def wave_220():
    return Waveform(sine(220.0), SR)


@pytest.fixture(scope="session")
def overfit():
    """The pinned 500-step overfit run, shared by the acceptance and CLI tests."""
    ad.set_precision("f32")
    t0 = time.perf_counter()
    trainer, reports = overfit_run()
    return trainer, reports, time.perf_counter() - t0


# ---------------------------------------------------------------- acceptance summary

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    prev = _RESULTS.get(num, (title, True, [], []))
    ok = prev[1]
    if rep.when == "call" or rep.failed:
        ok = ok and rep.passed
    names = prev[2] + ([item.name] if rep.when == "call" else [])
    details = prev[3] + ([detail] if detail and rep.when == "call" else [])
    _RESULTS[num] = (title, ok, names, details)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_RESULTS):
        title, ok, names, details = _RESULTS[num]
        line = f"[{'PASS' if ok else 'FAIL'}] {num}. {title}"
        if details:
            line += "  (" + "; ".join(details) + ")"
        tr.write_line(line)
