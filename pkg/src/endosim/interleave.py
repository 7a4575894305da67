"""Exhaustive schedule exploration at syscall-phase granularity.

Each syscall event decomposes into enter/screen/handle/exit micro-steps;
non-syscall events are a single step. The explorer enumerates every schedule
up to a preemption bound (switching away from a runnable thread costs one
preemption; switches forced by completion or lock blocking are free) and
requires the scenario's expectations to hold in every schedule.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from . import callgate, syscalls, transitions as tr
from .config import GateVariant
from .errors import BudgetExceeded, SafetyBreachError
from .machine import MachineState, safety_check, structural_audit
from .scenario import Event, Report, EventOutcome, RunEnv, Scenario, event_transition, run_events, setup_state
from .config import default_config
from .syscalls import InFlight

DEFAULT_SCHEDULE_CAP = 200_000

class _Phase(Enum):
    ENTER = 0
    SCREEN = 1
    HANDLE = 2
    EXIT = 3


@dataclass(frozen=True)
class _ThreadPos:
    """One thread's progress through its program."""

    event_index: int = 0
    phase: _Phase = _Phase.ENTER
    flight: InFlight | None = None


@dataclass(frozen=True)
class _Node:
    state: MachineState
    positions: tuple[tuple[int, _ThreadPos], ...]  # (tid, position), sorted by tid
    last_tid: int | None
    preemptions: int
    outcomes: tuple[tuple[int, str, str | None], ...]  # (event id, actual, reason)


def _is_syscall_event(ev: Event) -> bool:
    return ev.verb not in (
        "jump",
        "tsx",
        "tsx_attack",
        "forkbomb",
        "poke",
        "poke_bytes",
        "read_probe",
        "jump_into",
        "signal",
        "forge_signal",
    )


def explore(
    scenario: Scenario,
    depth: int,
    variant: str | None = None,
    seed: int = 0,
    schedule_cap: int = DEFAULT_SCHEDULE_CAP,
) -> Report:
    """Enumerate all schedules; the report aggregates expectation conformance."""
    chosen = variant or scenario.variant or "secc_eph"
    config = default_config(chosen)
    base = setup_state(scenario, config, seed)
    env = RunEnv()
    outcomes: list[EventOutcome] = []
    base, init_breaches = run_events(base, scenario.init_events, env, outcomes)
    if init_breaches:
        raise SafetyBreachError("breach during scenario init")
    if any(not o.matched for o in outcomes):
        bad = next(o for o in outcomes if not o.matched)
        raise ValueError(f"init event at line {bad.line} expected {bad.expected}, got {bad.actual}")

    programs = scenario.thread_programs()
    if len(programs) > 3:
        raise ValueError("interleaving exploration supports at most 3 threads")
    ordered_events = list(scenario.events)
    event_ids = {id(ev): i for i, ev in enumerate(ordered_events)}
    tids = sorted(programs)
    init_positions = tuple((tid, _ThreadPos()) for tid in tids)

    schedules = 0
    breaches = 0
    bypasses = 0
    denials = 0
    total_pkru = 0
    # Every schedule must agree on each event's outcome for the report to be
    # meaningful; collect actual outcomes per event across schedules.
    per_event_actual: dict[int, set[tuple[str, str | None]]] = {i: set() for i in range(len(ordered_events))}

    def thread_runnable(state: MachineState, tid: int, pos: _ThreadPos) -> bool:
        if pos.event_index >= len(programs[tid]):
            return False
        ev = programs[tid][pos.event_index]
        if _is_syscall_event(ev) and pos.phase is _Phase.HANDLE:
            flight = pos.flight
            if flight is not None and flight.status is None:
                names = syscalls.locks_needed(_classify_handler(state, flight), flight.req)
                return syscalls.try_acquire(state, names, tid) is not None
        return True

    def _classify_handler(state: MachineState, flight: InFlight) -> str | None:
        from .domains import domain_ops

        try:
            cls = syscalls.classify(state.config, flight.req.name)
        except Exception:
            return "domain" if flight.req.name in domain_ops() else None
        return cls.handler

    def step(node: _Node, tid: int) -> _Node | None:
        """Advance one micro-step of thread ``tid``; None when blocked."""
        state = node.state
        pos = dict(node.positions)[tid]
        ev = programs[tid][pos.event_index]
        eid = event_ids[id(ev)]
        outcomes_out = node.outcomes
        if not _is_syscall_event(ev):
            t = event_transition(state, ev, env)
            state, result = tr.apply_transition(state, t)
            outcomes_out = outcomes_out + ((eid, result.status.value, result.reason),)
            new_pos = _ThreadPos(event_index=pos.event_index + 1)
        elif pos.phase is _Phase.ENTER:
            t = event_transition(state, ev, env)
            req = syscalls.SyscallRequest(tid=t.arg("tid"), name=t.arg("name"), params=t.arg("params"))
            state, flight = syscalls.phase_enter(state, req)
            new_pos = _ThreadPos(pos.event_index, _Phase.SCREEN, flight)
        elif pos.phase is _Phase.SCREEN:
            state, flight = syscalls.phase_screen(state, pos.flight)
            new_pos = _ThreadPos(pos.event_index, _Phase.HANDLE, flight)
        elif pos.phase is _Phase.HANDLE:
            handled = syscalls.phase_handle(state, pos.flight)
            if handled is None:
                return None
            state, flight = handled
            new_pos = _ThreadPos(pos.event_index, _Phase.EXIT, flight)
        else:
            state, result = syscalls.phase_exit(state, pos.flight)
            outcomes_out = outcomes_out + ((eid, result.status.value, result.reason),)
            verdict = safety_check(state)
            if not verdict.safe:
                raise SafetyBreachError("; ".join(v.detail for v in verdict.violations))
            problems = structural_audit(state)
            if problems:
                raise SafetyBreachError("; ".join(problems))
            new_pos = _ThreadPos(event_index=pos.event_index + 1)
        _check_ephemeral(state)
        positions = tuple((t, new_pos if t == tid else p) for t, p in node.positions)
        preempted = node.last_tid is not None and node.last_tid != tid
        if preempted:
            last_pos = dict(node.positions)[node.last_tid]
            if not thread_runnable(node.state, node.last_tid, last_pos):
                preempted = False  # forced switch
        return _Node(
            state=state,
            positions=positions,
            last_tid=tid,
            preemptions=node.preemptions + (1 if preempted else 0),
            outcomes=outcomes_out,
        )

    def _check_ephemeral(state: MachineState) -> None:
        if state.config.gate.variant is not GateVariant.EPHEMERAL:
            return
        for t, thread in state.threads.items():
            if thread.current_domain.is_trusted:
                continue
            region = state.trampoline.regions.get(t)
            if region and any(c is callgate.ByteClass.SYSCALL for _, c in region.contents):
                raise SafetyBreachError(f"untrusted tid {t} has a live syscall byte in its own region")

    root = _Node(state=base, positions=init_positions, last_tid=None, preemptions=0, outcomes=())
    stack = [root]
    while stack:
        node = stack.pop()
        runnable = [t for t, p in node.positions if thread_runnable(node.state, t, p)]
        done = all(p.event_index >= len(programs[t]) for t, p in node.positions)
        if done:
            schedules += 1
            if schedules > schedule_cap:
                raise BudgetExceeded(f"schedule count exceeded {schedule_cap}")
            for eid, actual, reason in node.outcomes:
                per_event_actual[eid].add((actual, reason))
            continue
        if not runnable:
            # All remaining threads blocked on locks: cannot happen with
            # single-lock syscalls, but guard against silent schedule loss.
            raise SafetyBreachError("scheduler deadlock: no runnable thread")
        choices = runnable
        if node.preemptions >= depth and node.last_tid in runnable:
            choices = [node.last_tid]
        for tid in sorted(choices, reverse=True):
            try:
                nxt = step(node, tid)
            except SafetyBreachError:
                breaches += 1
                continue
            if nxt is not None:
                stack.append(nxt)

    events_out = list(outcomes)
    for eid, ev in enumerate(ordered_events):
        actuals = per_event_actual[eid]
        if not actuals:
            actual, reason = "unreached", None
        elif len(actuals) == 1:
            actual, reason = next(iter(actuals))
        else:
            # Outcome differs across schedules; report the mismatching one if
            # any, else the lexically first.
            mismatches = sorted(a for a in actuals if a[0] != ev.expect)
            actual, reason = mismatches[0] if mismatches else sorted(actuals)[0]
        events_out.append(
            EventOutcome(len(events_out), ev.tid, ev.verb, ev.line, ev.expect, actual, reason, 0)
        )
        if actual == "deny":
            denials += 1
        if actual == "bypass":
            bypasses += 1
    return Report(
        scenario=scenario.name,
        variant=chosen,
        seed=seed,
        events=tuple(events_out),
        denials=denials,
        bypasses=bypasses,
        sp_violations=0,
        breaches=breaches,
        pkru_transitions=total_pkru,
        schedules=schedules,
    )
