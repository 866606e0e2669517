from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evolve_vas import wire  # noqa: E402
from evolve_vas.platform import build_platform  # noqa: E402


@pytest.fixture
def platform():
    return build_platform("EVolve100", "ideal", seed=0)


@pytest.fixture
def connected(platform):
    session, handles = platform.connect((wire.UPDATES, wire.SIEM, wire.PAYMENTS))
    return platform, session, handles


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
