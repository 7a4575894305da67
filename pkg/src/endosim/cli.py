"""endosim command line: a thin client over the service layer.

Every subcommand builds the same request model the HTTP endpoint accepts and
either executes it in process or, with ``--server``, posts it to a running
service. Exit codes: 0 pass, 1 expectation mismatch, 2 safety breach.
"""
from __future__ import annotations

import json
import sys
import urllib.request
from pathlib import Path

import click
from pydantic import BaseModel

from .errors import SafetyBreachError
from .service import api
from .service.models import (
    AttacksRequest,
    FuzzRequest,
    InterleaveRequest,
    MonteCarloRequest,
    RunRequest,
)

EXIT_PASS = 0
EXIT_MISMATCH = 1
EXIT_BREACH = 2


def _post(server: str, path: str, request: BaseModel) -> dict:
    data = request.model_dump_json().encode()
    req = urllib.request.Request(
        server.rstrip("/") + path, data=data, headers={"Content-Type": "application/json"}
    )
    with urllib.request.urlopen(req) as resp:
        return json.loads(resp.read())


def _execute(server: str | None, path: str, request: BaseModel, local_fn) -> dict:
    if server:
        return _post(server, path, request)
    try:
        return local_fn(request).model_dump()
    except api.ServiceError as exc:
        raise click.ClickException(exc.detail) from exc


def _emit(payload: dict, json_out: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    if json_out:
        Path(json_out).write_text(text + "\n")
    else:
        click.echo(text)


def _scenario_request_fields(scenario: str) -> dict:
    path = Path(scenario)
    if path.exists():
        return {"scenario_text": path.read_text()}
    return {"scenario_name": scenario}


@click.group()
def main() -> None:
    """Deterministic simulator of a nested in-process isolation monitor."""


@main.command()
@click.option("--variant", default=None, help="gate configuration, e.g. secc_eph or secc_rand:32")
@click.option("--scenario", required=True, help="scenario file path or bundled scenario name")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--json", "json_out", default=None, help="write the report to this file")
@click.option("--server", default=None, help="POST to a running endosim service instead")
def run(variant: str | None, scenario: str, seed: int, json_out: str | None, server: str | None) -> None:
    """Run one scenario sequentially and report expectation conformance."""
    request = RunRequest(variant=variant, seed=seed, **_scenario_request_fields(scenario))
    try:
        payload = _execute(server, "/run", request, api.run)
    except SafetyBreachError as exc:
        click.echo(f"safety breach: {exc}", err=True)
        sys.exit(EXIT_BREACH)
    _emit(payload, json_out)
    if payload["breaches"]:
        sys.exit(EXIT_BREACH)
    sys.exit(EXIT_PASS if payload["passed"] else EXIT_MISMATCH)


@main.command()
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--json", "json_out", default=None)
@click.option("--server", default=None)
def attacks(seed: int, json_out: str | None, server: str | None) -> None:
    """Run the 15-attack suite under every gate variant and print the matrix."""
    request = AttacksRequest(seed=seed)
    payload = _execute(server, "/attacks", request, api.attacks)
    if json_out:
        _emit(payload, json_out)
    else:
        click.echo(payload["rendered"])
        click.echo(f"matches expected matrix: {payload['matches_expected']}")
    sys.exit(EXIT_PASS if payload["matches_expected"] else EXIT_MISMATCH)


@main.command()
@click.option("--pages", default=16, show_default=True, type=int)
@click.option("--freq", default=32, show_default=True, type=int)
@click.option("--trials", default=1_000_000, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--json", "json_out", default=None)
@click.option("--server", default=None)
def montecarlo(pages: int, freq: int, trials: int, seed: int, json_out: str | None, server: str | None) -> None:
    """Estimate the randomized gate's per-window bypass rate."""
    request = MonteCarloRequest(pages=pages, freq=freq, trials=trials, seed=seed)
    payload = _execute(server, "/montecarlo", request, api.montecarlo)
    _emit(payload, json_out)


@main.command()
@click.option("--scenario", required=True, help="scenario file path or bundled scenario name")
@click.option("--depth", default=6, show_default=True, type=int, help="preemption bound")
@click.option("--variant", default=None)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--json", "json_out", default=None)
@click.option("--server", default=None)
def interleave(
    scenario: str, depth: int, variant: str | None, seed: int, json_out: str | None, server: str | None
) -> None:
    """Exhaustively explore schedules of a scenario at syscall-phase granularity."""
    request = InterleaveRequest(
        variant=variant, depth=depth, seed=seed, **_scenario_request_fields(scenario)
    )
    try:
        payload = _execute(server, "/interleave", request, api.interleave)
    except SafetyBreachError as exc:
        click.echo(f"safety breach: {exc}", err=True)
        sys.exit(EXIT_BREACH)
    _emit(payload, json_out)
    if payload["breaches"]:
        sys.exit(EXIT_BREACH)
    sys.exit(EXIT_PASS if payload["passed"] else EXIT_MISMATCH)


@main.command()
@click.option("--traces", default=100, show_default=True, type=int)
@click.option("--syscalls", default=100, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--json", "json_out", default=None)
@click.option("--server", default=None)
def fuzz(traces: int, syscalls: int, seed: int, json_out: str | None, server: str | None) -> None:
    """Run seeded random traces; any unsafe commit aborts with exit code 2."""
    request = FuzzRequest(traces=traces, syscalls_per_trace=syscalls, base_seed=seed)
    try:
        payload = _execute(server, "/fuzz", request, api.fuzz)
    except SafetyBreachError as exc:
        click.echo(f"safety breach: {exc}", err=True)
        sys.exit(EXIT_BREACH)
    _emit(payload, json_out)
    sys.exit(EXIT_PASS if payload["breaches"] == 0 else EXIT_BREACH)


@main.command()
def scenarios() -> None:
    """List the bundled scenario corpus."""
    for name in api.scenarios().scenarios:
        click.echo(name)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Start the HTTP service."""
    import uvicorn

    uvicorn.run("endosim.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
