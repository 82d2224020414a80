import os
import sys
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

SCRIPTS = Path(__file__).parent / "scripts"


@pytest.fixture
def script():
    """Path to a helper script, run with the current interpreter."""

    def _get(name):
        return [sys.executable, str(SCRIPTS / name)]

    return _get


@pytest.fixture(autouse=True)
def _private_tmpdir(tmp_path, monkeypatch):
    monkeypatch.setenv("HALOSCOPE_TMPDIR", str(tmp_path))
    os.environ.setdefault("PYTHONHASHSEED", "0")


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record and print a criterion outcome, then assert it."""

    def _verdict(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert ok, line

    return _verdict


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
