"""The secure syscall call gate: randomized, ephemeral, and CET-backed trampolines.

Each thread owns a disjoint trampoline region; the kernel-side filter (seccomp
or syscall-user-dispatch) only accepts syscall instructions executed from the
thread's own region. The gadget is the 3-byte syscall+return sequence the gate
protects.
"""
from __future__ import annotations

from dataclasses import dataclass

from ._util import evolve as replace
from enum import Enum
from fractions import Fraction
from typing import TYPE_CHECKING, Mapping

from .config import GADGET_LEN, PAGE_SIZE, GateVariant
from .errors import KernelFault, PolicyDenied, SafetyBreachError
from .rng import draw_below

if TYPE_CHECKING:  # pragma: no cover
    from .machine import MachineState


class ByteClass(Enum):
    INT3 = "int3"
    SYSCALL = "syscall"
    RET = "ret"


class ProbeOutcome(Enum):
    KILLED_BY_FILTER = "killed_by_filter"
    INT3_FAULT = "int3_fault"
    CET_CONTROL_FAULT = "cet_control_fault"
    UNCHECKED_SYSCALL_EXECUTED = "unchecked_syscall_executed"
    TX_ABORT = "tx_abort"
    TX_COMMIT = "tx_commit"


# Attack outcomes that constitute a gate bypass.
BYPASS_OUTCOMES = frozenset({ProbeOutcome.UNCHECKED_SYSCALL_EXECUTED})

TRAMPOLINE_BASE = 0x7000_0000_0000
REGION_GUARD_PAGES = 1

# Ephemeral and CET gadgets sit at a fixed, well-known offset.
FIXED_GADGET_OFFSET = 0x10


@dataclass(frozen=True)
class TrampolineRegion:
    """One thread's trampoline: a few executable pages, sparse non-int3 bytes."""

    base: int
    pages: int
    contents: tuple[tuple[int, ByteClass], ...] = ()  # sorted (offset, class)
    gadget_at: int | None = None
    rerand_counter: int = 0

    @property
    def size(self) -> int:
        return self.pages * PAGE_SIZE

    @property
    def positions(self) -> int:
        """Number of distinct gadget positions the region admits."""
        return self.size - GADGET_LEN + 1

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size

    def byte_at(self, addr: int) -> ByteClass:
        offset = addr - self.base
        for off, cls in self.contents:
            if off == offset:
                return cls
        return ByteClass.INT3

    def with_gadget(self, offset: int) -> TrampolineRegion:
        contents = (
            (offset, ByteClass.SYSCALL),
            (offset + 1, ByteClass.SYSCALL),
            (offset + 2, ByteClass.RET),
        )
        return replace(self, contents=contents, gadget_at=offset)

    def without_gadget(self) -> TrampolineRegion:
        return replace(self, contents=(), gadget_at=None)


@dataclass(frozen=True)
class ShadowStack:
    frames: tuple[int, ...] = ()

    def push(self, addr: int) -> ShadowStack:
        return ShadowStack(self.frames + (addr,))

    def pop(self) -> tuple[int, ShadowStack]:
        if not self.frames:
            raise KernelFault("CetControlFault", "shadow stack underflow")
        return self.frames[-1], ShadowStack(self.frames[:-1])


@dataclass(frozen=True)
class TrampolineState:
    """All per-thread gate state plus the CET landing-pad set."""

    regions: Mapping[int, TrampolineRegion]
    shadow_stacks: Mapping[int, ShadowStack]
    endbr_set: frozenset[int]
    next_region_index: int = 0

    def region_of(self, tid: int) -> TrampolineRegion:
        return self.regions[tid]

    def with_region(self, tid: int, region: TrampolineRegion) -> TrampolineState:
        return replace(self, regions={**self.regions, tid: region})

    def with_shadow(self, tid: int, stack: ShadowStack) -> TrampolineState:
        return replace(self, shadow_stacks={**self.shadow_stacks, tid: stack})


def position_count(pages: int) -> int:
    return pages * PAGE_SIZE - GADGET_LEN + 1


def guess_probability(pages: int, freq: int) -> Fraction:
    """Per-attack success probability of guessing the randomized gadget.

    Exact rational arithmetic; (16 pages, freq 32) gives 1/1024.
    """
    if pages < 1 or freq < 1:
        raise ValueError("pages and freq must be >= 1")
    return Fraction(2 * freq, PAGE_SIZE * pages)


def _fresh_region(tramp: TrampolineState, pages: int) -> tuple[TrampolineState, TrampolineRegion]:
    idx = tramp.next_region_index
    span = (pages + REGION_GUARD_PAGES) * PAGE_SIZE
    region = TrampolineRegion(base=TRAMPOLINE_BASE + idx * span, pages=pages)
    return replace(tramp, next_region_index=idx + 1), region


def attach_thread(state: MachineState, tid: int) -> MachineState:
    """Allocate a disjoint trampoline region (and shadow stack) for a new thread."""
    gate = state.config.gate
    pages = gate.pages if gate.variant is GateVariant.RANDOM else 1
    tramp, region = _fresh_region(state.trampoline, pages)
    rng = state.rng
    if gate.variant is GateVariant.RANDOM:
        pos, rng = draw_below(rng, region.positions)
        region = region.with_gadget(pos)
    elif gate.variant is GateVariant.CET:
        region = region.with_gadget(FIXED_GADGET_OFFSET)
    tramp = tramp.with_region(tid, region).with_shadow(tid, ShadowStack())
    return state.evolve(trampoline=tramp, rng=rng)


def rerandomize(state: MachineState, tid: int) -> MachineState:
    """Move the thread's gadget to a fresh uniform position and reset the counter."""
    region = state.trampoline.region_of(tid)
    pos, rng = draw_below(state.rng, region.positions)
    region = replace(region.with_gadget(pos), rerand_counter=0)
    return state.evolve(trampoline=state.trampoline.with_region(tid, region), rng=rng)


def gate_enter(state: MachineState, tid: int) -> MachineState:
    """Gate entry side effects for the untrusted→trusted transition."""
    gate = state.config.gate
    region = state.trampoline.region_of(tid)
    if gate.variant is GateVariant.RANDOM:
        if region.rerand_counter >= gate.rerand_freq:
            state = rerandomize(state, tid)
            region = state.trampoline.region_of(tid)
    elif gate.variant is GateVariant.EPHEMERAL:
        region = region.with_gadget(FIXED_GADGET_OFFSET)
    elif gate.variant is GateVariant.CET:
        shadow = state.trampoline.shadow_stacks[tid].push(region.base + region.gadget_at)
        state = state.evolve(trampoline=state.trampoline.with_shadow(tid, shadow))
        region = state.trampoline.region_of(tid)
    region = replace(region, rerand_counter=region.rerand_counter + 1)
    return state.evolve(trampoline=state.trampoline.with_region(tid, region))


def gate_exit(state: MachineState, tid: int) -> MachineState:
    """Gate exit side effects for the trusted→untrusted transition."""
    gate = state.config.gate
    tramp = state.trampoline
    region = tramp.region_of(tid)
    if gate.variant is GateVariant.EPHEMERAL:
        region = region.without_gadget()
        tramp = tramp.with_region(tid, region)
        if any(cls is ByteClass.SYSCALL for _, cls in region.contents):
            raise SafetyBreachError("ephemeral gate exit left a syscall byte mapped")
    elif gate.variant is GateVariant.CET:
        expected = region.base + region.gadget_at
        top, shadow = tramp.shadow_stacks[tid].pop()
        if top != expected:
            raise KernelFault("CetControlFault", "shadow stack return mismatch")
        tramp = tramp.with_shadow(tid, shadow)
    return state.evolve(trampoline=tramp)


def _jump_outcome(
    regions: Mapping[int, TrampolineRegion],
    variant: GateVariant,
    endbr_set: frozenset[int],
    tid: int,
    target: int,
) -> ProbeOutcome:
    """Decide the outcome of an untrusted jump to ``target``.

    Order: kernel filter, then the byte actually at the target, then CET
    landing-pad enforcement, then a gadget hit.
    """
    own = regions.get(tid)
    hit_region = None
    for region in regions.values():
        if region.contains(target):
            hit_region = region
            break
    byte = hit_region.byte_at(target) if hit_region is not None else ByteClass.INT3
    in_own = own is not None and own.contains(target)
    if byte is ByteClass.SYSCALL and not in_own:
        return ProbeOutcome.KILLED_BY_FILTER
    if byte is ByteClass.INT3:
        return ProbeOutcome.INT3_FAULT
    if variant is GateVariant.CET and target not in endbr_set:
        return ProbeOutcome.CET_CONTROL_FAULT
    if (
        hit_region is not None
        and hit_region.gadget_at is not None
        and target == hit_region.base + hit_region.gadget_at
        and in_own
    ):
        return ProbeOutcome.UNCHECKED_SYSCALL_EXECUTED
    # Mid-gadget or ret-byte hit: decodes into garbage and traps.
    return ProbeOutcome.INT3_FAULT


def attack_jump(state: MachineState, tid: int, target: int) -> ProbeOutcome:
    """A hostile direct jump by an untrusted thread; pure, never mutates state."""
    tramp = state.trampoline
    return _jump_outcome(tramp.regions, state.config.gate.variant, tramp.endbr_set, tid, target)


def tsx_probe(state: MachineState, tid: int, target: int) -> ProbeOutcome:
    """Transactional probe of a trampoline byte: commits only on a ret byte."""
    if not state.config.tsx_enabled:
        raise PolicyDenied("TsxDisabled")
    for region in state.trampoline.regions.values():
        if region.contains(target):
            if region.byte_at(target) is ByteClass.RET:
                return ProbeOutcome.TX_COMMIT
            return ProbeOutcome.TX_ABORT
    return ProbeOutcome.TX_ABORT


def cleanup_transaction(
    state: MachineState, tid: int, signal_steps: tuple[int, ...] = ()
) -> tuple[MachineState, int]:
    """Ephemeral gate-exit cleanup modelled as a restartable transaction.

    The cleanup erases the gadget bytes one step at a time. A signal arriving
    at step ``i`` (0-based, at most one restart per queued signal) queues the
    signal and restarts the cleanup from its first step. Returns the new state
    and the number of restarts taken; the gadget is always gone on return.
    """
    from . import signals as sigmod

    region = state.trampoline.region_of(tid)
    pending = list(signal_steps)
    restarts = 0
    step = 0
    erased: set[int] = set()
    while True:
        if pending and pending[0] == step:
            signo = 40 + restarts  # distinct real-time signo per arrival
            state = sigmod.kernel_deliver(state, tid, signo, sigmod.SigContext.IN_MONITOR)
            pending.pop(0)
            restarts += 1
            step = 0
            erased.clear()
            continue
        if step >= GADGET_LEN:
            break
        erased.add(step)
        step += 1
    region = region.without_gadget()
    state = state.evolve(trampoline=state.trampoline.with_region(tid, region))
    return state, restarts
