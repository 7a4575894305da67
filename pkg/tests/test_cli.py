"""The endosim command line: subcommands, exit codes, JSON output."""
import json

import pytest
from click.testing import CliRunner

from endosim.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def test_scenarios_lists_corpus(runner):
    result = runner.invoke(main, ["scenarios"])
    assert result.exit_code == 0
    assert "fork_bomb" in result.output


def test_run_bundled_by_name(runner):
    result = runner.invoke(
        main, ["run", "--variant", "secc_eph", "--scenario", "pku_permission", "--seed", "1"]
    )
    assert result.exit_code == 0
    payload = json.loads(result.output)
    assert payload["passed"] is True


def test_run_scenario_file_and_json_output(runner, tmp_path):
    scn = tmp_path / "probe.scn"
    scn.write_text("t0: open /proc/self/mem expect deny\n")
    out = tmp_path / "report.json"
    result = runner.invoke(
        main,
        ["run", "--variant", "secc_eph", "--scenario", str(scn), "--seed", "2", "--json", str(out)],
    )
    assert result.exit_code == 0
    payload = json.loads(out.read_text())
    assert payload["passed"] is True
    assert payload["events"][0]["reason"] == "SensitiveInode"


def test_run_exit_code_on_expectation_mismatch(runner, tmp_path):
    scn = tmp_path / "bad.scn"
    scn.write_text("t0: getppid expect deny\n")
    result = runner.invoke(main, ["run", "--variant", "secc_eph", "--scenario", str(scn)])
    assert result.exit_code == 1


def test_montecarlo_small(runner):
    result = runner.invoke(
        main, ["montecarlo", "--pages", "16", "--freq", "32", "--trials", "10000", "--seed", "4"]
    )
    assert result.exit_code == 0
    payload = json.loads(result.output)
    assert payload["formula_rate"] == "1/1024"


def test_interleave_command(runner):
    result = runner.invoke(main, ["interleave", "--scenario", "race_pwritev", "--depth", "6"])
    assert result.exit_code == 0
    payload = json.loads(result.output)
    assert payload["schedules"] >= 2 and payload["passed"]


def test_fuzz_command(runner):
    result = runner.invoke(main, ["fuzz", "--traces", "3", "--syscalls", "25", "--seed", "5"])
    assert result.exit_code == 0
    payload = json.loads(result.output)
    assert payload["breaches"] == 0


def test_attacks_renders_matrix(runner):
    result = runner.invoke(main, ["attacks", "--seed", "0"])
    assert result.exit_code == 0
    assert "Fork Bomb" in result.output
    assert "matches expected matrix: True" in result.output
