"""Request/response schemas for the simulation service."""
from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class VariantsResponse(BaseModel):
    variants: list[str]


class ScenariosResponse(BaseModel):
    scenarios: list[str]


class EventResult(BaseModel):
    index: int
    tid: int
    verb: str
    line: int
    expected: str
    actual: str
    reason: str | None = None
    pkru_transitions: int


class RunRequest(BaseModel):
    variant: str | None = None
    scenario_name: str | None = None
    scenario_text: str | None = None
    seed: int = 0


class RunResponse(BaseModel):
    scenario: str
    variant: str
    seed: int
    schedules: int
    passed: bool
    denials: int
    bypasses: int
    sp_violations: int
    breaches: int
    pkru_transitions: int
    events: list[EventResult]


class AttacksRequest(BaseModel):
    seed: int = 0


class AttackRow(BaseModel):
    attack: str
    verdicts: dict[str, str]


class AttacksResponse(BaseModel):
    columns: list[str]
    rows: list[AttackRow]
    matches_expected: bool
    rendered: str


class MonteCarloRequest(BaseModel):
    pages: int = Field(default=16, ge=1)
    freq: int = Field(default=32, ge=1)
    trials: int = Field(default=1_000_000, ge=1)
    seed: int = 0


class MonteCarloResponse(BaseModel):
    pages: int
    freq: int
    trials: int
    seed: int
    positions: int
    bypasses: int
    empirical_rate: float
    closed_form_rate: float
    formula_rate: str
    formula_rate_float: float
    formula_over_closed_form: float


class InterleaveRequest(BaseModel):
    scenario_name: str | None = None
    scenario_text: str | None = None
    variant: str | None = None
    depth: int = Field(default=6, ge=0)
    seed: int = 0
    schedule_cap: int = Field(default=200_000, ge=1)


class FuzzRequest(BaseModel):
    traces: int = Field(default=100, ge=1)
    syscalls_per_trace: int = Field(default=100, ge=1)
    base_seed: int = 0


class FuzzResponse(BaseModel):
    traces: int
    steps: int
    committed: int
    denials: int
    faults: int
    breaches: int
    ephemeral_checks: int
