from pathlib import Path

import pytest

from acre.protocol import parse_protocol, resolve, resolve_all

FIXTURES = Path(__file__).parent / "fixtures"


def declared(name):
    return parse_protocol((FIXTURES / name).read_bytes())


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("ACRE_CACHE_DIR", str(tmp_path / "cache"))


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def vickrey():
    return resolve(declared("vickrey.xml"))


@pytest.fixture
def process_documents():
    return resolve(declared("process-documents.xml"))


@pytest.fixture
def pd_cancel():
    resolved = resolve_all([declared("cancel.xml"), declared("process-documents-cancel.xml")])
    return resolved[next(pid for pid in resolved if pid.name == "process-documents-cancel")]


_acceptance_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        _acceptance_results[number] = (title, report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance_results):
        title, outcome = _acceptance_results[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {number}: {title}")
