from __future__ import annotations

import subprocess
import sys
from pathlib import Path

import pytest

DEMOS = Path(__file__).resolve().parents[1] / "demos"


@pytest.mark.parametrize("name", ["charging_session.py", "tamper_detection.py"])
def test_demo_runs(name):
    out = subprocess.run([sys.executable, str(DEMOS / name)], capture_output=True, text=True, timeout=120)
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip()
