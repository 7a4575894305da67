"""Service operations over the core simulator, shared by HTTP routes and the CLI."""
from __future__ import annotations

from .. import __version__
from ..attacks import COLUMNS, list_scenarios, load_scenario, run_attack_suite
from ..config import VARIANT_NAMES
from ..errors import BudgetExceeded, SafetyBreachError, ScenarioParseError
from ..fuzz import run_fuzz_corpus
from ..interleave import explore
from ..montecarlo import monte_carlo_guess
from ..scenario import Report, Scenario, parse_scenario, run_scenario
from .models import (
    AttackRow,
    AttacksRequest,
    AttacksResponse,
    EventResult,
    FuzzRequest,
    FuzzResponse,
    HealthResponse,
    InterleaveRequest,
    MonteCarloRequest,
    MonteCarloResponse,
    RunRequest,
    RunResponse,
    ScenariosResponse,
    VariantsResponse,
)


class ServiceError(Exception):
    def __init__(self, status_code: int, detail: str):
        self.status_code = status_code
        self.detail = detail
        super().__init__(detail)


def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


def variants() -> VariantsResponse:
    return VariantsResponse(variants=list(VARIANT_NAMES))


def scenarios() -> ScenariosResponse:
    return ScenariosResponse(scenarios=list_scenarios())


def _resolve_scenario(name: str | None, text: str | None) -> Scenario:
    if (name is None) == (text is None):
        raise ServiceError(422, "provide exactly one of scenario_name or scenario_text")
    try:
        if name is not None:
            return load_scenario(name)
        return parse_scenario(text, name="inline")
    except FileNotFoundError as exc:
        raise ServiceError(404, str(exc)) from exc
    except ScenarioParseError as exc:
        raise ServiceError(422, str(exc)) from exc


def _report_response(report: Report) -> RunResponse:
    return RunResponse(
        scenario=report.scenario,
        variant=report.variant,
        seed=report.seed,
        schedules=report.schedules,
        passed=report.passed,
        denials=report.denials,
        bypasses=report.bypasses,
        sp_violations=report.sp_violations,
        breaches=report.breaches,
        pkru_transitions=report.pkru_transitions,
        events=[
            EventResult(
                index=ev.index,
                tid=ev.tid,
                verb=ev.verb,
                line=ev.line,
                expected=ev.expected,
                actual=ev.actual,
                reason=ev.reason,
                pkru_transitions=ev.pkru_transitions,
            )
            for ev in report.events
        ],
    )


def run(req: RunRequest) -> RunResponse:
    scenario = _resolve_scenario(req.scenario_name, req.scenario_text)
    try:
        report = run_scenario(req.variant, scenario, req.seed)
    except ValueError as exc:
        raise ServiceError(422, str(exc)) from exc
    return _report_response(report)


def attacks(req: AttacksRequest) -> AttacksResponse:
    matrix = run_attack_suite(seed=req.seed)
    payload = matrix.to_dict()
    return AttacksResponse(
        columns=[c for c, _ in COLUMNS],
        rows=[AttackRow(attack=row["attack"], verdicts=row["verdicts"]) for row in payload["rows"]],
        matches_expected=payload["matches_expected"],
        rendered=matrix.render(),
    )


def montecarlo(req: MonteCarloRequest) -> MonteCarloResponse:
    result = monte_carlo_guess(req.pages, req.freq, req.trials, req.seed)
    return MonteCarloResponse(**result.to_dict())


def interleave(req: InterleaveRequest) -> RunResponse:
    scenario = _resolve_scenario(req.scenario_name, req.scenario_text)
    try:
        report = explore(
            scenario, depth=req.depth, variant=req.variant, seed=req.seed, schedule_cap=req.schedule_cap
        )
    except BudgetExceeded as exc:
        raise ServiceError(422, str(exc)) from exc
    except SafetyBreachError as exc:
        raise ServiceError(500, f"safety breach: {exc}") from exc
    except ValueError as exc:
        raise ServiceError(422, str(exc)) from exc
    return _report_response(report)


def fuzz(req: FuzzRequest) -> FuzzResponse:
    try:
        stats = run_fuzz_corpus(req.traces, req.syscalls_per_trace, base_seed=req.base_seed)
    except SafetyBreachError as exc:
        raise ServiceError(500, f"safety breach: {exc}") from exc
    return FuzzResponse(
        traces=req.traces,
        steps=stats.steps,
        committed=stats.committed,
        denials=stats.denials,
        faults=stats.faults,
        breaches=stats.breaches,
        ephemeral_checks=stats.ephemeral_checks,
    )
