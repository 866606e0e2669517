from __future__ import annotations

import subprocess
import sys

import pytest

from evolve_vas.cli import main


def test_oracle_prints_three_decimals(capsys):
    assert main(["oracle", "--profile", "EVolve100", "--transport", "ideal", "--req", "1024",
                 "--resp", "100000000"]) == 0
    assert capsys.readouterr().out.strip() == "8004.082"


def test_oracle_loss(capsys):
    assert main(["oracle", "--profile", "5G", "--transport", "loss", "--req", "100000000", "--resp", "64"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(104179.7, abs=1)


def test_oracle_zero_request_is_usage_error(capsys):
    assert main(["oracle", "--profile", "EVolve10", "--req", "0", "--resp", "1"]) == 2
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["run", "--scenario", "nope", "--profile", "5G", "--out", "x.csv"],
                                  ["run", "--scenario", "stability", "--profile", "6G", "--out", "x.csv"],
                                  ["oracle", "--profile", "5G"],
                                  ["frobnicate"]])
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    assert main([a.replace("x.csv", str(tmp_path / "x.csv")) for a in argv]) == 2


def test_run_then_report(tmp_path, capsys):
    out = tmp_path / "m.csv"
    assert main(["run", "--scenario", "micropayments", "--profile", "EVolve10,5G", "--samples", "2",
                 "--bursts", "1,3", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "micropayments" in printed and "EVolve10" in printed
    assert len(out.read_text().splitlines()) == 1 + 2 * 2 * 2
    dat = tmp_path / "m.dat"
    assert main(["report", str(out), "--dat", str(dat)]) == 0
    assert capsys.readouterr().out == printed
    assert dat.exists()


def test_report_malformed_csv_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("nonsense\n")
    assert main(["report", str(bad)]) == 2
    assert "bad.csv:1" in capsys.readouterr().err


def test_report_missing_file_is_runtime_error(tmp_path, capsys):
    assert main(["report", str(tmp_path / "missing.csv")]) == 3


def test_report_empty_is_ok(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    assert main(["report", str(empty)]) == 0


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "evolve_vas", "oracle", "--profile", "EVolve10",
                        "--req", "1024", "--resp", "1024"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "5.638"
