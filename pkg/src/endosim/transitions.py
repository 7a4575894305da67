"""Transition constructors, the commit protocol, and trace execution.

Applying a transition either commits a new state (whose safety predicates are
re-checked), reports a denial or fault while returning the input state
object untouched, or raises :class:`SafetyBreachError` when a committed state
would violate safety (a simulator bug, never expected).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

from . import callgate, signals as sigmod, syscalls
from .callgate import ProbeOutcome
from .errors import PolicyDenied, SafetyBreachError
from .machine import MachineState, page_of, safety_check, start_user, structural_audit
from .rng import draw_below
from .syscalls import ResultStatus, SyscallRequest


class Status(Enum):
    OK = "ok"
    DENIED = "deny"
    FAULT = "fault"
    BYPASS = "bypass"


@dataclass(frozen=True)
class StepResult:
    status: Status
    reason: str | None = None
    value: int = 0
    pkru_transitions: int = 0
    outcome: ProbeOutcome | None = None

    @property
    def ok(self) -> bool:
        return self.status is Status.OK


@dataclass(frozen=True)
class Transition:
    kind: str
    params: Mapping[str, object] = field(default_factory=dict)

    def arg(self, key: str, default=None):
        return self.params.get(key, default)


def noop() -> Transition:
    return Transition("noop")


def boot_user() -> Transition:
    return Transition("boot_user")


def syscall(tid: int, name: str, **params) -> Transition:
    return Transition("syscall", {"tid": tid, "name": name, "params": params})


def in_child(child_index: int, inner: Transition) -> Transition:
    return Transition("in_child", {"child": child_index, "inner": inner})


def kernel_signal(tid: int, signo: int, context: sigmod.SigContext | None = None) -> Transition:
    return Transition("kernel_signal", {"tid": tid, "signo": signo, "context": context})


def forged_signal(tid: int) -> Transition:
    return Transition("forged_signal", {"tid": tid})


def probe_jump(tid: int, target: int) -> Transition:
    return Transition("probe_jump", {"tid": tid, "target": target})


def probe_tsx(tid: int, target: int) -> Transition:
    return Transition("probe_tsx", {"tid": tid, "target": target})


def tsx_attack(tid: int) -> Transition:
    return Transition("tsx_attack", {"tid": tid})


def fork_bomb(tid: int, windows: int | None = None, guesses: int | None = None) -> Transition:
    return Transition("fork_bomb", {"tid": tid, "windows": windows, "guesses": guesses})


def poke(tid: int, addr: int, value: int) -> Transition:
    return Transition("poke", {"tid": tid, "addr": addr, "value": value})


def poke_bytes(tid: int, addr: int, data: bytes) -> Transition:
    return Transition("poke_bytes", {"tid": tid, "addr": addr, "data": data})


def read_probe(tid: int, addr: int) -> Transition:
    return Transition("read_probe", {"tid": tid, "addr": addr})


def jump_into(tid: int, addr: int) -> Transition:
    return Transition("jump_into", {"tid": tid, "addr": addr})


_SYSCALL_TO_PROBE = {
    ResultStatus.OK: Status.OK,
    ResultStatus.DENIED: Status.DENIED,
    ResultStatus.FAULT: Status.FAULT,
}

_PROBE_STATUS = {
    ProbeOutcome.UNCHECKED_SYSCALL_EXECUTED: Status.BYPASS,
    ProbeOutcome.KILLED_BY_FILTER: Status.FAULT,
    ProbeOutcome.INT3_FAULT: Status.FAULT,
    ProbeOutcome.CET_CONTROL_FAULT: Status.FAULT,
    ProbeOutcome.TX_COMMIT: Status.OK,
    ProbeOutcome.TX_ABORT: Status.DENIED,
}


def _apply_inner(state: MachineState, t: Transition) -> tuple[MachineState, StepResult]:
    kind = t.kind
    if kind == "noop":
        return state, StepResult(Status.OK)
    if kind == "boot_user":
        return start_user(state), StepResult(Status.OK)
    if kind == "syscall":
        req = SyscallRequest(tid=t.arg("tid"), name=t.arg("name"), params=t.arg("params"))
        try:
            new_state, res = syscalls.dispatch(state, req)
        except PolicyDenied as exc:
            return state, StepResult(Status.DENIED, reason=exc.reason, pkru_transitions=0)
        return new_state, StepResult(
            _SYSCALL_TO_PROBE[res.status],
            reason=res.reason,
            value=res.value,
            pkru_transitions=res.pkru_transitions,
        )
    if kind == "in_child":
        idx = t.arg("child")
        if idx >= len(state.children):
            return state, StepResult(Status.DENIED, reason="NoSuchChild")
        child = state.children[idx]
        new_child, res = apply_transition(child, t.arg("inner"))
        if new_child is child:
            return state, res
        children = state.children[:idx] + (new_child,) + state.children[idx + 1 :]
        return state.evolve(children=children), res
    if kind == "kernel_signal":
        tid, signo = t.arg("tid"), t.arg("signo")
        context = t.arg("context") or _derive_context(state, tid)
        new_state = sigmod.kernel_deliver(state, tid, signo, context)
        return new_state, StepResult(Status.OK, value=signo)
    if kind == "forged_signal":
        _, outcome = sigmod.forged_entry(state, t.arg("tid"))
        return state, StepResult(Status.DENIED, reason="ForgedSignal")
    if kind == "probe_jump":
        outcome = callgate.attack_jump(state, t.arg("tid"), t.arg("target"))
        return state, StepResult(_PROBE_STATUS[outcome], reason=outcome.value, outcome=outcome)
    if kind == "probe_tsx":
        try:
            outcome = callgate.tsx_probe(state, t.arg("tid"), t.arg("target"))
        except PolicyDenied as exc:
            return state, StepResult(Status.DENIED, reason=exc.reason)
        return state, StepResult(_PROBE_STATUS[outcome], reason=outcome.value, outcome=outcome)
    if kind == "tsx_attack":
        return _tsx_attack(state, t.arg("tid"))
    if kind == "fork_bomb":
        return _fork_bomb(state, t.arg("tid"), t.arg("windows"), t.arg("guesses"))
    if kind == "poke":
        tid, addr = t.arg("tid"), t.arg("addr")
        if not state.can_write(tid, addr):
            return state, StepResult(Status.FAULT, reason="MpkFault")
        return state.evolve(words={**state.words, addr: t.arg("value")}), StepResult(Status.OK)
    if kind == "poke_bytes":
        tid, addr, data = t.arg("tid"), t.arg("addr"), t.arg("data")
        page = page_of(addr)
        if not state.can_write(tid, addr):
            return state, StepResult(Status.FAULT, reason="MpkFault")
        base = bytearray(state.page_bytes.get(page, b"\x00" * 0))
        off = addr - page * 4096
        if len(base) < off + len(data):
            base.extend(b"\x00" * (off + len(data) - len(base)))
        base[off : off + len(data)] = data
        return state.evolve(page_bytes={**state.page_bytes, page: bytes(base)}), StepResult(Status.OK)
    if kind == "read_probe":
        if not state.can_read(t.arg("tid"), t.arg("addr")):
            return state, StepResult(Status.FAULT, reason="MpkFault")
        return state, StepResult(Status.OK)
    if kind == "jump_into":
        # Executing another domain's code without a mediated call: the domain
        # never changes, so no privilege is acquired.
        thread = state.threads[t.arg("tid")]
        return state, StepResult(Status.OK, value=thread.current_domain.index)
    raise ValueError(f"unknown transition kind {kind!r}")


def _derive_context(state: MachineState, tid: int) -> sigmod.SigContext:
    thread = state.threads[tid]
    if thread.in_monitor:
        return sigmod.SigContext.IN_MONITOR
    if state.ring_of(thread.current_domain) is not MachineState.APP_RING:
        return sigmod.SigContext.IN_SUBDOMAIN
    return sigmod.SigContext.IN_UNTRUSTED


def _tsx_attack(state: MachineState, tid: int) -> tuple[MachineState, StepResult]:
    """Scan the thread's trampoline transactionally, then jump below the leaked ret."""
    if not state.config.tsx_enabled:
        return state, StepResult(Status.DENIED, reason="TsxDisabled")
    region = state.trampoline.region_of(tid)
    leak = None
    for offset in range(region.size):
        if region.byte_at(region.base + offset) is callgate.ByteClass.RET:
            leak = region.base + offset
            break
    if leak is None:
        return state, StepResult(Status.DENIED, reason="NoLeak")
    outcome = callgate.attack_jump(state, tid, leak - 2)
    if outcome in callgate.BYPASS_OUTCOMES:
        return state, StepResult(Status.BYPASS, reason=outcome.value, value=leak, outcome=outcome)
    # The probe leaked an address but the follow-up jump was stopped.
    return state, StepResult(Status.DENIED, reason=outcome.value, value=leak, outcome=outcome)


def _fork_bomb(
    state: MachineState, tid: int, windows: int | None, guesses: int | None
) -> tuple[MachineState, StepResult]:
    """Brute-force the gadget location, one forked child per guess.

    Each window models one re-randomization interval of the victim: the gadget
    sits still for ``guesses`` victim syscalls while children probe inherited
    copies of the address space. The budget defaults to enough windows that a
    vulnerable configuration is found with overwhelming probability.
    """
    from .config import GateVariant

    gate = state.config.gate
    region = state.trampoline.region_of(tid)
    if guesses is None:
        guesses = gate.rerand_freq if gate.variant is GateVariant.RANDOM else 32
    if windows is None:
        if gate.variant is GateVariant.RANDOM:
            per_window = 1.0 - (1.0 - 1.0 / region.positions) ** guesses
            windows = int(16.0 / per_window) + 1
        else:
            windows = 1024
    rng = state.rng
    regions = dict(state.trampoline.regions)
    endbr = state.trampoline.endbr_set
    hits = 0
    first_hit_window = -1
    current = region
    for w in range(windows):
        if gate.variant is GateVariant.RANDOM:
            pos, rng = draw_below(rng, current.positions)
            current = current.with_gadget(pos)
            regions[tid] = current
        for _ in range(guesses):
            guess, rng = draw_below(rng, current.positions)
            outcome = callgate._jump_outcome(regions, gate.variant, endbr, tid, current.base + guess)
            if outcome is ProbeOutcome.UNCHECKED_SYSCALL_EXECUTED:
                hits += 1
                if first_hit_window < 0:
                    first_hit_window = w
        if hits:
            break
    new_state = state.evolve(trampoline=state.trampoline.with_region(tid, current), rng=rng)
    if hits:
        return new_state, StepResult(
            Status.BYPASS,
            reason="unchecked_syscall_executed",
            value=first_hit_window,
            outcome=ProbeOutcome.UNCHECKED_SYSCALL_EXECUTED,
        )
    return new_state, StepResult(Status.DENIED, reason="NoBypass", value=windows)


def apply_transition(state: MachineState, t: Transition) -> tuple[MachineState, StepResult]:
    """Apply one transition; commit only if the resulting state is safe.

    Denials and faults return the input state object itself (bit-identical is
    guaranteed by construction: states are never mutated in place).
    """
    new_state, result = _apply_inner(state, t)
    if new_state is not state:
        verdict = safety_check(new_state)
        if not verdict.safe:
            raise SafetyBreachError(
                "commit would violate safety: " + "; ".join(v.detail for v in verdict.violations)
            )
        problems = structural_audit(new_state)
        if problems:
            raise SafetyBreachError("structural audit failed: " + "; ".join(problems))
    return new_state, result


def try_transition(state: MachineState, t: Transition) -> tuple[MachineState, StepResult | str]:
    """Total wrapper: returns the state plus a result or the string 'SafetyBreach'."""
    try:
        return apply_transition(state, t)
    except SafetyBreachError:
        return state, "SafetyBreach"


@dataclass(frozen=True)
class TraceReport:
    final_state: MachineState
    steps: tuple[StepResult, ...]
    denial_count: int
    fault_count: int
    breach: bool

    @property
    def committed(self) -> int:
        return sum(1 for s in self.steps if s.status is Status.OK)


def run_trace(state: MachineState, transitions: list[Transition]) -> TraceReport:
    """Apply transitions in order, stopping at the first safety breach."""
    steps: list[StepResult] = []
    denials = 0
    faults = 0
    breach = False
    for t in transitions:
        try:
            state, result = apply_transition(state, t)
        except SafetyBreachError:
            breach = True
            break
        steps.append(result)
        if result.status is Status.DENIED:
            denials += 1
        elif result.status is Status.FAULT:
            faults += 1
    return TraceReport(
        final_state=state, steps=tuple(steps), denial_count=denials, fault_count=faults, breach=breach
    )
