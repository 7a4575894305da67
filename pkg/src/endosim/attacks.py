"""The bundled attack suite and its defense matrix.

Fifteen attack scenarios run under the randomized, ephemeral, and CET gate
configurations. A cell is Vulnerable when any event of the run produced a
gate bypass (an unchecked syscall) or a safety breach; Prevented otherwise.
The expected matrix is all-Prevented except the fork bomb and the TSX probe
against the randomized gate.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .scenario import Report, Scenario, parse_scenario, run_scenario

SCENARIO_ENV_VAR = "ENDOSIM_SCENARIO_DIR"

ATTACK_ROWS: tuple[tuple[str, str], ...] = (
    ("Inconsistency of PKU Permission", "pku_permission"),
    ("Inconsistency of PT Permissions", "pt_permission"),
    ("Mappings with Mutable Backings", "mutable_backing"),
    ("Changing Code by Relocation", "code_relocation"),
    ("Modifying PKRU via sigreturn", "sigreturn_pkru"),
    ("Race condition in Signal Delivery", "signal_delivery_race"),
    ("Race condition in Scanning", "scan_race"),
    ("Determination of Trusted Mappings", "trusted_mapping_probe"),
    ("Influencing Behavior with seccomp", "seccomp_influence"),
    ("Modifying Trusted Mappings", "modify_trusted_mapping"),
    ("Forged Signal", "forged_signal"),
    ("Fork Bomb", "fork_bomb"),
    ("Syscall Arguments Abuse", "argument_abuse"),
    ("TSX attack", "tsx_probe"),
    ("Race condition", "race_condition"),
)

COLUMNS: tuple[tuple[str, str], ...] = (
    ("rand", "secc_rand:32"),
    ("eph", "secc_eph"),
    ("cet", "secc_cet"),
)

EXPECTED_VULNERABLE: frozenset[tuple[str, str]] = frozenset(
    {("Fork Bomb", "rand"), ("TSX attack", "rand")}
)


def scenario_dir() -> Path:
    override = os.environ.get(SCENARIO_ENV_VAR)
    if override:
        return Path(override)
    return Path(str(resources.files("endosim").joinpath("scenarios")))


def list_scenarios() -> list[str]:
    return sorted(p.stem for p in scenario_dir().glob("*.scn"))


def load_scenario(name: str) -> Scenario:
    path = scenario_dir() / f"{name}.scn"
    if not path.exists():
        raise FileNotFoundError(f"no bundled scenario named {name!r} in {scenario_dir()}")
    return parse_scenario(path.read_text(), name=name)


@dataclass(frozen=True)
class AttackMatrix:
    cells: tuple[tuple[str, tuple[tuple[str, str], ...]], ...]  # row -> ((col, verdict), ...)
    reports: tuple[Report, ...]

    def verdict(self, row: str, column: str) -> str:
        for name, cols in self.cells:
            if name == row:
                return dict(cols)[column]
        raise KeyError(row)

    def matches_expected(self) -> bool:
        for name, cols in self.cells:
            for column, verdict in cols:
                want = "Vulnerable" if (name, column) in EXPECTED_VULNERABLE else "Prevented"
                if verdict != want:
                    return False
        return True

    def to_dict(self) -> dict:
        return {
            "columns": [c for c, _ in COLUMNS],
            "rows": [
                {"attack": name, "verdicts": {col: verdict for col, verdict in cols}}
                for name, cols in self.cells
            ],
            "matches_expected": self.matches_expected(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def render(self) -> str:
        width = max(len(name) for name, _ in ATTACK_ROWS) + 2
        head = "attack".ljust(width) + "".join(c.ljust(12) for c, _ in COLUMNS)
        lines = [head, "-" * len(head)]
        for name, cols in self.cells:
            lines.append(name.ljust(width) + "".join(v.ljust(12) for _, v in cols))
        return "\n".join(lines)


def _cell_verdict(report: Report) -> str:
    if report.bypasses > 0 or report.breaches > 0:
        return "Vulnerable"
    return "Prevented"


def run_attack_suite(seed: int = 0) -> AttackMatrix:
    """Execute every attack under every gate column and fill the matrix."""
    cells = []
    reports: list[Report] = []
    for name, scn_name in ATTACK_ROWS:
        scenario = load_scenario(scn_name)
        row = []
        for column, variant in COLUMNS:
            report = run_scenario(variant, scenario, seed)
            reports.append(report)
            row.append((column, _cell_verdict(report)))
        cells.append((name, tuple(row)))
    return AttackMatrix(cells=tuple(cells), reports=tuple(reports))
