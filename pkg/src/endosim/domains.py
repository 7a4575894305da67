"""Multi-domain compartments: creation, cross-domain calls, page grants, and
the 64-bit-mode check guarding the call gate.

Compartments occupy the untrusted protection keys above the application's own
domain. Privilege is ordered monitor > safebox > unbox > sandbox; grants flow
strictly downward and cross-domain calls enter only through declared
entrypoints, returning in nested order.
"""
from __future__ import annotations

from dataclasses import dataclass

from ._util import evolve as replace
from enum import Enum
from typing import Callable, Mapping

from .config import MAX_UNTRUSTED_DOMAINS
from .errors import PolicyDenied
from .machine import (
    Compartment,
    DomainId,
    DomainTable,
    GrantRecord,
    MachineState,
    PageAttr,
    PageRecord,
    PermSet,
    ReturnFrame,
    Ring,
    STUB_BASE,
    page_of,
)
from .syscalls import ArgSnapshot, SyscallRequest, code_scan

RING_BY_NAME = {"safebox": Ring.SAFEBOX, "unbox": Ring.UNBOX, "sandbox": Ring.SANDBOX}


def _free_index(table: DomainTable) -> int:
    # Index 0 is the application's own domain; compartments take the rest.
    used = set(table.compartments) | {0}
    for idx in range(1, MAX_UNTRUSTED_DOMAINS):
        if idx not in used:
            return idx
    raise PolicyDenied("DomainsExhausted", f"all {MAX_UNTRUSTED_DOMAINS} untrusted keys in use")


def iv_create_domain(
    state: MachineState,
    caller: DomainId,
    name: str,
    ring: Ring,
    code_pages: tuple[int, ...],
    data_pages: tuple[int, ...],
    entrypoints: Mapping[int, int],
    stub: int | None = None,
) -> tuple[MachineState, int]:
    """Assign an unused key, re-key the pages, and record the entry table."""
    idx = _free_index(state.domains)
    domain = DomainId.untrusted(idx)
    for page in (*code_pages, *data_pages):
        rec = state.pages.get(page)
        if rec is None or rec.domain != caller:
            raise PolicyDenied("PageOwnedElsewhere", f"page {page:#x}")
    code_set = frozenset(code_pages)
    for entry_id, addr in entrypoints.items():
        if page_of(addr) not in code_set:
            raise PolicyDenied("BadEntrypoint", f"entry {entry_id} at {addr:#x} outside code pages")
    updates: dict[int, PageRecord] = {}
    for page in code_pages:
        rec = state.pages[page]
        if rec.attr not in (PageAttr.EXEC, PageAttr.RETIRED):
            raise PolicyDenied("PageOwnedElsewhere", f"page {page:#x} not promotable code")
        if rec.attr is PageAttr.RETIRED:
            hit = code_scan(state.page_bytes.get(page, b""), state.config.scan_syscall_opcode)
            if hit is not None:
                raise PolicyDenied("ScanFailed", f"forbidden opcode at {hit}")
        updates[page] = PageRecord(domain, PermSet(r=True, x=True), PageAttr.EXEC)
    for page in data_pages:
        rec = state.pages[page]
        updates[page] = PageRecord(domain, replace(rec.perms, x=False), PageAttr.DOMAIN_PRIVATE)
    stack_page = state.next_map_page
    updates[stack_page] = PageRecord(domain, PermSet(r=True, w=True), PageAttr.DOMAIN_PRIVATE)
    stub_addr = stub if stub is not None else STUB_BASE + idx * 0x40
    stubs = tuple(STUB_BASE + idx * 0x40 + 8 * (k + 1) for k in range(len(entrypoints)))
    comp = Compartment(
        domain=domain,
        ring=ring,
        name=name,
        code_pages=code_set,
        data_pages=frozenset(data_pages) | {stack_page},
        entrypoints=dict(entrypoints),
        stub=stub_addr,
        stubs=stubs,
        stack_page=stack_page,
    )
    table = replace(state.domains, compartments={**state.domains.compartments, idx: comp})
    tramp = state.trampoline
    tramp = replace(tramp, endbr_set=tramp.endbr_set | {stub_addr} | set(stubs))
    state = state.with_pages(updates).evolve(
        domains=table,
        trampoline=tramp,
        next_map_page=stack_page + 1,
        exec_locked=True,
    )
    return state, idx


def isolate_library(
    state: MachineState,
    caller: DomainId,
    name: str,
    code_pages: tuple[int, ...],
    data_pages: tuple[int, ...],
    exports: tuple[int, ...],
) -> tuple[MachineState, int]:
    """Safebox a whole library: every exported symbol becomes an entrypoint."""
    entrypoints = {i: addr for i, addr in enumerate(exports)}
    return iv_create_domain(state, caller, name, Ring.SAFEBOX, code_pages, data_pages, entrypoints)


def xcall(
    state: MachineState, tid: int, caller: DomainId, target_index: int, entry_id: int, nargs: int = 0
) -> tuple[MachineState, DomainId]:
    """Mediated cross-domain call: stack switch, nested return record, signals held."""
    comp = state.domains.compartments.get(target_index)
    if comp is None:
        raise PolicyDenied("NoSuchDomain", f"domain {target_index}")
    if entry_id not in comp.entrypoints:
        raise PolicyDenied("BadEntrypoint", f"entry {entry_id}")
    if caller == comp.domain:
        raise PolicyDenied("LateralCall", "caller is already the target domain")
    caller_ring = state.ring_of(caller)
    if caller_ring == comp.ring:
        raise PolicyDenied("LateralCall", f"{caller_ring.name.lower()} to {comp.ring.name.lower()}")
    if nargs > state.config.xcall_arg_slots:
        raise PolicyDenied("ArgLimit", f"{nargs} > {state.config.xcall_arg_slots}")
    thread = state.threads[tid]
    frame = ReturnFrame(caller_domain=caller, caller_stack=thread.stack_domain, tid=tid)
    thread = replace(
        thread,
        return_chain=thread.return_chain + (frame,),
        stack_domain=comp.domain,
        sig_blocked=True,
    )
    return state.with_thread(thread), comp.domain


def xreturn(state: MachineState, tid: int, claim_index: int | None = None) -> tuple[MachineState, DomainId]:
    """Return from the most recent cross-domain call; out-of-order claims fail."""
    thread = state.threads[tid]
    if not thread.return_chain:
        raise PolicyDenied("ReturnOrder", "empty return chain")
    top = thread.return_chain[-1]
    if top.tid != tid:
        raise PolicyDenied("ReturnOrder", "frame belongs to another thread")
    if claim_index is not None and top.caller_domain != DomainId.untrusted(claim_index):
        raise PolicyDenied("ReturnOrder", "return does not match the nested caller")
    caller_ring = state.ring_of(top.caller_domain)
    thread = replace(
        thread,
        return_chain=thread.return_chain[:-1],
        stack_domain=top.caller_stack,
        sig_blocked=caller_ring is not Ring.UNBOX and not top.caller_domain.is_trusted,
    )
    return state.with_thread(thread), top.caller_domain


def grant(state: MachineState, caller: DomainId, page: int, grantee_index: int) -> MachineState:
    """Give one page to a strictly lower-privilege domain until revoked."""
    rec = state.pages.get(page)
    if rec is None or rec.domain != caller:
        raise PolicyDenied("NotOwner", f"page {page:#x}")
    grantee = DomainId.untrusted(grantee_index)
    if grantee_index != 0 and grantee_index not in state.domains.compartments:
        raise PolicyDenied("NoSuchDomain", f"domain {grantee_index}")
    if state.ring_of(grantee) >= state.ring_of(caller):
        raise PolicyDenied("UpwardGrant", f"{state.ring_of(caller).name} -> {state.ring_of(grantee).name}")
    grants = tuple(g for g in state.domains.grants if not (g.page == page and g.grantee == grantee))
    grants = grants + (GrantRecord(page=page, owner=caller, grantee=grantee, active=True),)
    return state.evolve(domains=replace(state.domains, grants=grants))


def revoke(state: MachineState, caller: DomainId, page: int) -> MachineState:
    """Remove every grant of the page; revoking an ungranted page is a no-op."""
    rec = state.pages.get(page)
    if rec is None or rec.domain != caller:
        raise PolicyDenied("NotOwner", f"page {page:#x}")
    grants = tuple(
        replace(g, active=False) if (g.page == page and g.active) else g for g in state.domains.grants
    )
    return state.evolve(domains=replace(state.domains, grants=grants))


# -- syscall-handler adapters ---------------------------------------------------


def _h_create(state: MachineState, req: SyscallRequest, snap: ArgSnapshot):
    state, idx = iv_create_domain(
        state,
        snap.caller_domain,
        name=req.arg("label", f"domain{state.next_map_page}"),
        ring=RING_BY_NAME[req.arg("ring", "safebox")],
        code_pages=tuple(req.arg("code_pages", ())),
        data_pages=tuple(req.arg("data_pages", ())),
        entrypoints=dict(req.arg("entrypoints", {})),
    )
    return state, idx, None


def _h_isolate(state: MachineState, req: SyscallRequest, snap: ArgSnapshot):
    state, idx = isolate_library(
        state,
        snap.caller_domain,
        name=req.arg("label", "library"),
        code_pages=tuple(req.arg("code_pages", ())),
        data_pages=tuple(req.arg("data_pages", ())),
        exports=tuple(req.arg("exports", ())),
    )
    return state, idx, None


def _h_xcall(state: MachineState, req: SyscallRequest, snap: ArgSnapshot):
    state, target = xcall(
        state, req.tid, snap.caller_domain, req.arg("target"), req.arg("entry", 0), req.arg("nargs", 0)
    )
    return state, target.index, target


def _h_xreturn(state: MachineState, req: SyscallRequest, snap: ArgSnapshot):
    state, caller = xreturn(state, req.tid, req.arg("claim"))
    return state, max(caller.index, 0), caller


def _h_grant(state: MachineState, req: SyscallRequest, snap: ArgSnapshot):
    state = grant(state, snap.caller_domain, req.arg("page"), req.arg("grantee"))
    return state, 0, None


def _h_revoke(state: MachineState, req: SyscallRequest, snap: ArgSnapshot):
    state = revoke(state, snap.caller_domain, req.arg("page"))
    return state, 0, None


_DOMAIN_OPS: dict[str, Callable] = {
    "iv_create_domain": _h_create,
    "iv_isolate_library": _h_isolate,
    "xcall": _h_xcall,
    "xreturn": _h_xreturn,
    "iv_grant": _h_grant,
    "iv_revoke": _h_revoke,
}


def domain_ops() -> dict[str, Callable]:
    return _DOMAIN_OPS


# -- 64-bit mode check ------------------------------------------------------------


class CpuMode(Enum):
    LONG64 = "long64"
    COMPAT32 = "compat32"


class ModeCheckResult(Enum):
    PASS = "pass"
    INVALID_OPCODE_TRAP = "invalid_opcode_trap"


@dataclass(frozen=True)
class MiniCpu:
    rax: int
    cf: bool = False
    mode: CpuMode = CpuMode.LONG64


_MASK64 = (1 << 64) - 1
_MASK32 = (1 << 32) - 1


def mode_check(cpu: MiniCpu) -> tuple[MiniCpu, ModeCheckResult]:
    """Emulate the 11-byte gate-entry sequence that faults in compatibility mode.

    In 64-bit mode: shift left, increment (forcing bit 0 on), bit-test bit 0,
    the conditional jump skips the trapping instruction, and a right shift
    restores the accumulator. In compatibility mode the 64-bit operand
    prefixes decode as decrements, bit 0 stays clear, and the trap executes.
    Only the low 32 bits of the accumulator are assumed live at check sites.
    """
    if cpu.mode is CpuMode.LONG64:
        rax = (cpu.rax << 1) & _MASK64  # shl rax, 1
        rax = (rax + 1) & _MASK64  # inc rax
        cf = bool(rax & 1)  # bt rax, 0
        if cf:  # jc: skip the trap
            rax = rax >> 1  # shr rax, 1
            return MiniCpu(rax=rax, cf=cf, mode=cpu.mode), ModeCheckResult.PASS
        return MiniCpu(rax=rax, cf=cf, mode=cpu.mode), ModeCheckResult.INVALID_OPCODE_TRAP
    # Compatibility mode: each REX prefix decodes as `dec eax`.
    eax = cpu.rax & _MASK32
    eax = (eax - 1) & _MASK32  # rex -> dec eax
    eax = (eax << 1) & _MASK32  # shl eax, 1
    eax = (eax - 1) & _MASK32  # rex -> dec eax
    eax = (eax + 1) & _MASK32  # inc eax
    cf = bool(eax & 1)  # bt eax, 0: always clear after the shift
    if cf:  # pragma: no cover - unreachable by construction
        return MiniCpu(rax=eax, cf=cf, mode=cpu.mode), ModeCheckResult.PASS
    return MiniCpu(rax=eax, cf=cf, mode=cpu.mode), ModeCheckResult.INVALID_OPCODE_TRAP
