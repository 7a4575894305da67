"""Signal virtualization: registration, depth-1 pending queue, delivery, and return.

The monitor keeps the real kernel handler pointed at its own entrypoint and
tracks the application's handlers in a virtual table. Arriving signals are
queued (one slot per signal number, the kernel holds the overflow behind the
kernel-side mask) and delivered when the machine is about to resume untrusted
execution. Frames handed to untrusted code always carry an untrusted PKRU
image and a nonce so the virtual sigreturn can reject tampering.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from ._util import evolve as replace
from enum import Enum
from typing import TYPE_CHECKING, Mapping

from .config import IGNORED_BY_DEFAULT, UNCATCHABLE_SIGNALS
from .errors import PolicyDenied

if TYPE_CHECKING:  # pragma: no cover
    from .machine import DomainId, MachineState


class SigContext(Enum):
    IN_UNTRUSTED = "untrusted"
    IN_MONITOR = "monitor"
    IN_SUBDOMAIN = "subdomain"


@dataclass(frozen=True)
class SigAction:
    handler: int | None = None  # untrusted handler address; None = default action
    mask: frozenset[int] = frozenset()
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class SigInfo:
    signo: int
    sender_tid: int


@dataclass(frozen=True)
class SigFrame:
    """A monitor-issued signal frame; the monitor retains the authoritative copy."""

    nonce: int
    signo: int
    pkru_domain: DomainId  # image exposed to the handler; never trusted
    saved_domain: DomainId
    saved_stack: DomainId
    saved_mask: frozenset[int]
    rax: int  # interrupted syscall's return value, when applicable
    stack_addr: int  # untrusted stack or virtual altstack the frame sits on
    delivered_to: int


@dataclass(frozen=True)
class SignalState:
    table: Mapping[int, SigAction] = field(default_factory=dict)
    pending: Mapping[int, SigInfo] = field(default_factory=dict)  # depth-1 slots
    kernel_mask: frozenset[int] = frozenset()
    kernel_held: frozenset[int] = frozenset()  # coalesced kernel-side overflow
    user_mask: frozenset[int] = frozenset()
    override_mask: frozenset[int] | None = None
    frames: Mapping[int, SigFrame] = field(default_factory=dict)
    issued: frozenset[int] = frozenset()  # nonces of live frames
    next_nonce: int = 1
    altstacks: Mapping[int, int] = field(default_factory=dict)  # tid -> stack addr
    # The from-kernel flag lives in trusted memory: only a delivery arriving
    # with kernel-default key permissions can raise it, and the entrypoint
    # resets it after every check, so committed states always read 0.
    from_kernel_flag: int = 0


class ForgedEntryOutcome(Enum):
    REJECTED = "rejected"


def vsigaction(state: MachineState, signo: int, handler: int | None, mask: frozenset[int] = frozenset()) -> MachineState:
    """Register a virtual handler; the kernel-side registration stays monitor-owned."""
    if signo in state.config.reserved_signals:
        raise PolicyDenied("ReservedSignal", f"signal {signo} is monitor-reserved")
    if signo in UNCATCHABLE_SIGNALS:
        raise PolicyDenied("Uncatchable", f"signal {signo}")
    sig = state.signals
    table = {**sig.table, signo: SigAction(handler=handler, mask=frozenset(mask))}
    return state.evolve(signals=replace(sig, table=table))


def set_user_mask(state: MachineState, mask: frozenset[int]) -> MachineState:
    return state.evolve(signals=replace(state.signals, user_mask=frozenset(mask)))


def set_override_mask(state: MachineState, mask: frozenset[int]) -> MachineState:
    return state.evolve(signals=replace(state.signals, override_mask=frozenset(mask)))


def set_altstack(state: MachineState, tid: int, addr: int) -> MachineState:
    sig = state.signals
    return state.evolve(signals=replace(sig, altstacks={**sig.altstacks, tid: addr}))


def kernel_deliver(state: MachineState, tid: int, signo: int, context: SigContext) -> MachineState:
    """A signal arrives from the kernel while ``tid`` runs in ``context``.

    The entrypoint runs with the from-kernel flag raised (and reset before
    commit), queues the signal, and either delivers immediately (untrusted
    context) or defers to the next gate exit / cross-domain return.
    """
    sig = state.signals
    if signo in sig.kernel_mask:
        # The kernel model holds masked signals itself; they coalesce.
        return state.evolve(signals=replace(sig, kernel_held=sig.kernel_held | {signo}))
    assert signo not in sig.pending, "pending slot occupied while kernel mask clear"
    # Genuine kernel delivery: raise the from-kernel proof, check it at the
    # entrypoint, reset it. A forged entry never gets the flag up.
    sig = replace(sig, from_kernel_flag=1)
    assert sig.from_kernel_flag == 1
    sig = replace(sig, from_kernel_flag=0)
    pending = {**sig.pending, signo: SigInfo(signo=signo, sender_tid=tid)}
    kernel_mask = sig.kernel_mask | {signo}
    state = state.evolve(signals=replace(sig, pending=pending, kernel_mask=kernel_mask))
    if context is SigContext.IN_UNTRUSTED:
        return deliver_best(state, tid)
    # Monitor or subdomain context: resume the interrupted work untouched.
    return state


def select_pending(state: MachineState) -> tuple[int | None, MachineState]:
    """Pick the lowest pending signal not blocked by the effective mask.

    When an override mask is armed it substitutes for the user mask and is
    consumed by the delivery it enables.
    """
    sig = state.signals
    mask = sig.override_mask if sig.override_mask is not None else sig.user_mask
    for signo in sorted(sig.pending):
        if signo not in mask:
            if sig.override_mask is not None:
                state = state.evolve(signals=replace(sig, override_mask=None))
            return signo, state
    return None, state


def deliver_best(state: MachineState, tid: int, rax: int = 0) -> MachineState:
    """Deliver the selected pending signal to ``tid`` if it may receive one now."""
    thread = state.threads[tid]
    if thread.sig_blocked or state.ring_of(thread.current_domain) is not state.APP_RING:
        return state
    if thread.active_frame is not None:
        return state  # handler in progress; registration masks everything
    signo, state = select_pending(state)
    if signo is None:
        return state
    return deliver_to_untrusted(state, tid, signo, rax=rax)


def deliver_to_untrusted(state: MachineState, tid: int, signo: int, rax: int = 0) -> MachineState:
    """Build the handler frame on the untrusted stack and hand the signal over."""
    sig = state.signals
    thread = state.threads[tid]
    action = sig.table.get(signo, SigAction())
    info = sig.pending.get(signo)
    pending = dict(sig.pending)
    pending.pop(signo, None)
    kernel_mask = sig.kernel_mask - {signo}
    kernel_held = sig.kernel_held
    sig = replace(sig, pending=pending, kernel_mask=kernel_mask)
    state = state.evolve(signals=sig)
    if action.handler is None:
        state = _default_action(state, signo)
    else:
        frame = SigFrame(
            nonce=sig.next_nonce,
            signo=signo,
            pkru_domain=thread.current_domain,  # untrusted image, by construction
            saved_domain=thread.current_domain,
            saved_stack=thread.stack_domain,
            saved_mask=sig.user_mask,
            rax=rax,
            stack_addr=sig.altstacks.get(tid, state.user_stack_addr(tid)),
            delivered_to=tid,
        )
        frames = {**sig.frames, frame.nonce: frame}
        sig = replace(
            sig,
            frames=frames,
            issued=sig.issued | {frame.nonce},
            next_nonce=sig.next_nonce + 1,
            user_mask=sig.user_mask | action.mask | {signo},
        )
        state = state.evolve(signals=sig)
        state = state.with_thread(replace(thread, active_frame=frame.nonce))
    if signo in kernel_held and info is not None:
        # The kernel re-delivers a held instance as soon as the mask clears.
        sig2 = state.signals
        state = state.evolve(
            signals=replace(
                sig2,
                kernel_held=sig2.kernel_held - {signo},
                pending={**sig2.pending, signo: SigInfo(signo=signo, sender_tid=info.sender_tid)},
                kernel_mask=sig2.kernel_mask | {signo},
            )
        )
    return state


def _default_action(state: MachineState, signo: int) -> MachineState:
    if signo in IGNORED_BY_DEFAULT:
        return state
    return state.evolve(terminated=True)


def vsigreturn(state: MachineState, tid: int, presented_pkru: DomainId | None = None) -> MachineState:
    """Virtual sigreturn: restore the monitor-held context, then chain delivery.

    ``presented_pkru`` models the PKRU image in the frame the application hands
    back; anything that disagrees with the issued frame is rejected.
    """
    thread = state.threads[tid]
    if thread.active_frame is None:
        raise PolicyDenied("NoFrame", "sigreturn with no delivered signal")
    sig = state.signals
    frame = sig.frames[thread.active_frame]
    if frame.nonce not in sig.issued:
        raise PolicyDenied("TamperedFrame", "frame nonce not issued")
    if presented_pkru is not None and presented_pkru != frame.pkru_domain:
        raise PolicyDenied("TamperedFrame", "PKRU image does not match the issued frame")
    sig = replace(
        sig,
        issued=sig.issued - {frame.nonce},
        user_mask=frame.saved_mask,
    )
    state = state.evolve(signals=sig)
    restored = replace(
        thread,
        current_domain=frame.saved_domain,
        stack_domain=frame.saved_stack,
        pkru=state.pkru_for(frame.saved_domain),
        active_frame=None,
    )
    state = state.with_thread(restored)
    # A pending unmasked signal chains immediately; no untrusted instruction
    # runs in between.
    return deliver_best(state, tid)


def forged_entry(state: MachineState, tid: int) -> tuple[MachineState, ForgedEntryOutcome]:
    """Untrusted code jumps to the monitor signal entrypoint with a crafted frame.

    The from-kernel flag lives in trusted memory: the forger's write faults (or
    is skipped), the flag check fails, and the entry is rejected with no domain
    transition. Pure; the state is returned unchanged.
    """
    thread = state.threads[tid]
    assert not thread.current_domain.is_trusted
    return state, ForgedEntryOutcome.REJECTED


def queue_invariant_violations(sig: SignalState) -> list[str]:
    """Check the structural queue invariants; empty list means healthy."""
    problems = []
    for signo in sig.pending:
        if signo not in sig.kernel_mask:
            problems.append(f"pending slot {signo} without kernel mask bit")
    for nonce in sig.issued:
        frame = sig.frames.get(nonce)
        if frame is not None and frame.pkru_domain.is_trusted:
            problems.append(f"issued frame {nonce} carries a trusted PKRU image")
    if sig.from_kernel_flag != 0:
        problems.append("from-kernel flag left raised past the entry check")
    return problems
