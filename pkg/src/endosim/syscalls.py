"""The nested monitor's syscall path: classification, screening, locks, handlers.

Every dispatched syscall runs the same sequence: gate entry, argument
screening into monitor-owned snapshots, lock acquisition, the class handler,
lock release, gate exit. Exactly two PKRU transitions happen per dispatched
syscall regardless of class; denials never mutate the machine state.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from ._util import evolve as replace
from enum import Enum
from typing import Callable, Mapping

from . import callgate, signals as sigmod
from .config import (
    PAGE_SIZE,
    SYSCALL_PATTERN,
    WRPKRU_PATTERN,
    SimConfig,
    SyscallClass,
    SyscallKind,
    UnknownSyscall,
)
from .errors import KernelFault, PolicyDenied
from .machine import (
    APP_DOMAIN,
    DomainId,
    FileMappingRecord,
    LockTable,
    MachineState,
    OpenFile,
    PageAttr,
    PageRecord,
    PermSet,
    TRUSTED,
    page_of,
    page_span,
    round_up_pages,
)


@dataclass(frozen=True)
class PointerArg:
    """A pointer-typed syscall argument: (address, byte length).

    ``deref_words`` asks the screener to snapshot that many 8-byte words from
    the pointed-to memory; handlers must consume the snapshot, never the
    originals.
    """

    addr: int
    length: int
    deref_words: int = 0


@dataclass(frozen=True)
class SyscallRequest:
    tid: int
    name: str
    params: Mapping[str, object] = field(default_factory=dict)

    def arg(self, key: str, default=None):
        return self.params.get(key, default)


class ScreenVerdict(Enum):
    OK = "ok"
    POINTS_INTO_TRUSTED = "PointsIntoTrusted"
    POINTS_INTO_FOREIGN_DOMAIN = "PointsIntoForeignDomain"


@dataclass(frozen=True)
class ArgSnapshot:
    caller_domain: DomainId
    verdict: ScreenVerdict
    copies: Mapping[str, tuple[int, ...]] = field(default_factory=dict)


class ResultStatus(Enum):
    OK = "ok"
    DENIED = "deny"
    FAULT = "fault"


@dataclass(frozen=True)
class SyscallResult:
    status: ResultStatus
    value: int = 0
    reason: str | None = None
    pkru_transitions: int = 2
    locks_taken: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status is ResultStatus.OK


def classify(config: SimConfig, name: str) -> SyscallClass:
    """Deterministic, configuration-driven classification of a syscall name."""
    return config.classify_name(name)


def code_scan(data: bytes, include_syscall: bool = False) -> int | None:
    """Scan a byte sequence for forbidden opcode patterns.

    Returns the offset of the first occurrence (aligned or not) of the
    PKRU-write pattern, or of the raw syscall pattern when the active gate
    mechanism requires it; ``None`` when the bytes are clean.
    """
    hits = [i for i in (data.find(WRPKRU_PATTERN),) if i >= 0]
    if include_syscall:
        i = data.find(SYSCALL_PATTERN)
        if i >= 0:
            hits.append(i)
    return min(hits) if hits else None


def _page_domain_verdict(state: MachineState, caller: DomainId, addr: int, length: int) -> ScreenVerdict:
    verdict = ScreenVerdict.OK
    for page in page_span(addr, max(length, 1)):
        rec = state.pages.get(page)
        if rec is None:
            verdict = ScreenVerdict.POINTS_INTO_FOREIGN_DOMAIN
            continue
        if rec.domain.is_trusted:
            return ScreenVerdict.POINTS_INTO_TRUSTED
        if rec.domain != caller and not state.domains.grant_active(page, caller):
            verdict = ScreenVerdict.POINTS_INTO_FOREIGN_DOMAIN
    return verdict


def screen_args(state: MachineState, req: SyscallRequest, caller: DomainId) -> ArgSnapshot:
    """Copy every pointer argument into monitor storage and judge its target."""
    verdict = ScreenVerdict.OK
    copies: dict[str, tuple[int, ...]] = {}
    for key, value in req.params.items():
        if not isinstance(value, PointerArg):
            continue
        v = _page_domain_verdict(state, caller, value.addr, value.length)
        if v is ScreenVerdict.POINTS_INTO_TRUSTED:
            verdict = v
        elif v is not ScreenVerdict.OK and verdict is ScreenVerdict.OK:
            verdict = v
        if value.deref_words:
            copies[key] = tuple(state.words.get(value.addr + 8 * i, 0) for i in range(value.deref_words))
    return ArgSnapshot(caller_domain=caller, verdict=verdict, copies=copies)


# -- locks --------------------------------------------------------------------


def locks_needed(handler: str | None, req: SyscallRequest) -> tuple[str, ...]:
    if handler == "file":
        fd = req.arg("fd")
        return (f"fd:{fd}",) if fd is not None else ()
    if handler in ("memory", "domain"):
        return ("mapping",)
    if handler == "signal":
        return ("signal",)
    return ()


def try_acquire(state: MachineState, names: tuple[str, ...], tid: int) -> MachineState | None:
    """Take the named locks for ``tid``; None when any is held by another thread."""
    locks = state.locks
    per_fd = dict(locks.per_fd)
    mapping = locks.mapping_global
    signal = locks.signal_global
    for name in names:
        if name.startswith("fd:"):
            fd = int(name[3:])
            holder = per_fd.get(fd)
            if holder is not None and holder != tid:
                return None
            per_fd[fd] = tid
        elif name == "mapping":
            if mapping is not None and mapping != tid:
                return None
            mapping = tid
        elif name == "signal":
            if signal is not None and signal != tid:
                return None
            signal = tid
    return state.evolve(locks=LockTable(per_fd=per_fd, mapping_global=mapping, signal_global=signal))


def release(state: MachineState, names: tuple[str, ...], tid: int) -> MachineState:
    locks = state.locks
    per_fd = dict(locks.per_fd)
    mapping = locks.mapping_global
    signal = locks.signal_global
    for name in names:
        if name.startswith("fd:"):
            per_fd.pop(int(name[3:]), None)
        elif name == "mapping":
            mapping = None
        elif name == "signal":
            signal = None
    return state.evolve(locks=LockTable(per_fd=per_fd, mapping_global=mapping, signal_global=signal))


def fd_in_use_by_other(state: MachineState, fd: int, tid: int) -> bool:
    holder = state.locks.per_fd.get(fd)
    return holder is not None and holder != tid


# -- file ops ------------------------------------------------------------------


def _lookup_fd(state: MachineState, req: SyscallRequest) -> OpenFile:
    fd = req.arg("fd")
    of = state.open_files.get(fd)
    if of is None:
        raise PolicyDenied("BadFd", f"fd {fd}")
    return of


def _sensitive_guard(state: MachineState, of: OpenFile) -> None:
    if of.inode in state.fs.sensitive_inodes:
        raise PolicyDenied("SensitiveInode", of.path)


def file_ops(state: MachineState, req: SyscallRequest, snap: ArgSnapshot) -> tuple[MachineState, int]:
    name = req.name
    if name in ("open", "openat"):
        path = req.arg("path")
        fs = state.fs
        inode = fs.paths.get(path)
        if inode is None:
            inode = fs.next_inode
            fs = replace(fs, paths={**fs.paths, path: inode}, next_inode=inode + 1)
        if inode in fs.sensitive_inodes:
            raise PolicyDenied("SensitiveInode", path)
        fd = state.next_fd
        of = OpenFile(fd=fd, inode=inode, path=path, sensitive=False)
        state = state.evolve(open_files={**state.open_files, fd: of}, next_fd=fd + 1, fs=fs)
        return state, fd
    if name in ("socket", "accept", "epoll_create"):
        fs = state.fs
        fd = state.next_fd
        path = f"anon:{name}:{fd}"
        inode = fs.next_inode
        fs = replace(fs, paths={**fs.paths, path: inode}, next_inode=inode + 1)
        of = OpenFile(fd=fd, inode=inode, path=path)
        return state.evolve(open_files={**state.open_files, fd: of}, next_fd=fd + 1, fs=fs), fd
    if name in ("link", "symlink"):
        old, new = req.arg("old"), req.arg("new")
        inode = state.fs.paths.get(old)
        if inode is None:
            raise PolicyDenied("NoSuchPath", old)
        fs = replace(state.fs, paths={**state.fs.paths, new: inode})
        return state.evolve(fs=fs), 0
    of = _lookup_fd(state, req)
    if name == "close":
        open_files = dict(state.open_files)
        open_files.pop(of.fd)
        closed = state.closed_mapped_fds
        if any(mf.fd == of.fd for mf in state.file_mappings):
            closed = closed | {of.fd}
        return state.evolve(open_files=open_files, closed_mapped_fds=closed), 0
    if name == "fstat":
        return state, of.inode
    if name in ("dup", "dup2"):
        new_fd = req.arg("newfd", state.next_fd)
        open_files = dict(state.open_files)
        open_files.pop(new_fd, None)
        open_files[new_fd] = replace(of, fd=new_fd)
        return state.evolve(open_files=open_files, next_fd=max(state.next_fd, new_fd + 1)), new_fd
    _sensitive_guard(state, of)
    if name == "lseek":
        offset = req.arg("offset", 0)
        open_files = {**state.open_files, of.fd: replace(of, offset=offset)}
        return state.evolve(open_files=open_files), offset
    if name in ("read", "write"):
        length = req.arg("length", 0)
        open_files = {**state.open_files, of.fd: replace(of, offset=of.offset + length)}
        return state.evolve(open_files=open_files), length
    if name in ("pread64", "pwrite64"):
        return state, req.arg("length", 0)
    if name in ("readv", "writev", "pwritev"):
        # The io-vector was snapshotted at screen time; validate the snapshot's
        # target, never the live memory.
        base, blen = (snap.copies.get("iov") or (0, 0))[:2]
        verdict = _page_domain_verdict(state, snap.caller_domain, base, max(blen, 1))
        if verdict is ScreenVerdict.POINTS_INTO_TRUSTED:
            raise PolicyDenied("PointsIntoTrusted", f"iov target {base:#x}")
        if verdict is not ScreenVerdict.OK:
            raise PolicyDenied("PointsIntoForeignDomain", f"iov target {base:#x}")
        if name == "writev":
            open_files = {**state.open_files, of.fd: replace(of, offset=of.offset + blen)}
            state = state.evolve(open_files=open_files)
        return state, blen
    raise UnknownSyscall(name)


# -- memory ops ------------------------------------------------------------------


def _alias_would_violate(state: MachineState, fd: int, off: int, length: int, domain: DomainId) -> bool:
    for mf in state.file_mappings:
        if mf.fd != fd:
            continue
        if not (off < mf.off + mf.length and mf.off < off + length):
            continue
        rec = state.pages.get(page_of(mf.addr))
        if rec is not None and rec.domain != domain:
            return True
    return False


def mem_ops(state: MachineState, req: SyscallRequest, snap: ArgSnapshot) -> tuple[MachineState, int]:
    name = req.name
    caller = snap.caller_domain
    if name == "mmap":
        return _mmap(state, req, caller)
    if name == "mprotect":
        return _mprotect(state, req, caller)
    if name == "munmap":
        return _munmap(state, req, caller)
    if name == "mremap":
        return _mremap(state, req, caller)
    raise UnknownSyscall(name)


def _own_range(state: MachineState, caller: DomainId, addr: int, length: int) -> list[int]:
    pages = []
    for page in page_span(addr, length):
        rec = state.pages.get(page)
        if rec is None or rec.domain != caller:
            raise PolicyDenied("ForeignDomain", f"page {page:#x}")
        pages.append(page)
    return pages


def _mmap(state: MachineState, req: SyscallRequest, caller: DomainId) -> tuple[MachineState, int]:
    length = req.arg("length", PAGE_SIZE)
    perms: PermSet = req.arg("perms", PermSet(r=True, w=True))
    shared = bool(req.arg("shared", False))
    fd = req.arg("fd")
    offset = req.arg("offset", 0)
    content: bytes | None = req.arg("content")
    npages = round_up_pages(length)
    if npages < 1:
        raise PolicyDenied("BadLength", str(length))
    if perms.w and perms.x:
        raise PolicyDenied("WXViolation")
    if shared and perms.x:
        raise PolicyDenied("SharedToExec")
    addr = req.arg("addr")
    next_map = state.next_map_page
    if addr is None:
        addr = next_map * PAGE_SIZE
        next_map += npages
    for page in page_span(addr, npages * PAGE_SIZE):
        rec = state.pages.get(page)
        if rec is not None and rec.domain != caller:
            raise PolicyDenied("ForeignDomain", f"page {page:#x}")
        if rec is not None and rec.attr is PageAttr.EXEC and state.exec_locked:
            # Validated code is immutable once compartments exist.
            raise PolicyDenied("ExecLocked", f"page {page:#x}")
    updates: dict[int, PageRecord] = {}
    page_bytes = dict(state.page_bytes)
    mappings = state.file_mappings
    if fd is not None:
        of = state.open_files.get(fd)
        if of is None:
            raise PolicyDenied("BadFd", f"fd {fd}")
        _sensitive_guard(state, of)
        if perms.x:
            # Emulated executable file mapping: private copy, scanned, never
            # backed by the file.
            data = content or b""
            hit = code_scan(data, state.config.scan_syscall_opcode)
            if hit is not None:
                raise PolicyDenied("ScanFailed", f"forbidden opcode at {hit}")
            for i, page in enumerate(page_span(addr, npages * PAGE_SIZE)):
                updates[page] = PageRecord(caller, PermSet(r=perms.r, x=True), PageAttr.EXEC, backing=None)
                page_bytes[page] = data[i * PAGE_SIZE : (i + 1) * PAGE_SIZE]
        else:
            if _alias_would_violate(state, fd, offset, npages * PAGE_SIZE, caller):
                raise PolicyDenied("AliasViolation", f"fd {fd} offset {offset}")
            attr = PageAttr.SHARED if shared else PageAttr.RETIRED
            for i, page in enumerate(page_span(addr, npages * PAGE_SIZE)):
                updates[page] = PageRecord(caller, perms, attr, backing=(of.inode, offset + i * PAGE_SIZE))
                if content is not None:
                    page_bytes[page] = content[i * PAGE_SIZE : (i + 1) * PAGE_SIZE]
            mappings = mappings + (FileMappingRecord(fd=fd, off=offset, length=npages * PAGE_SIZE, addr=addr),)
    else:
        if perms.x:
            data = content or b""
            hit = code_scan(data, state.config.scan_syscall_opcode)
            if hit is not None:
                raise PolicyDenied("ScanFailed", f"forbidden opcode at {hit}")
            attr = PageAttr.EXEC
        else:
            attr = PageAttr.SHARED if shared else PageAttr.RETIRED
        for i, page in enumerate(page_span(addr, npages * PAGE_SIZE)):
            updates[page] = PageRecord(caller, perms, attr)
            if content is not None:
                page_bytes[page] = content[i * PAGE_SIZE : (i + 1) * PAGE_SIZE]
    state = state.with_pages(updates).evolve(
        page_bytes=page_bytes, file_mappings=mappings, next_map_page=next_map
    )
    return state, addr


def _mprotect(state: MachineState, req: SyscallRequest, caller: DomainId) -> tuple[MachineState, int]:
    addr = req.arg("addr")
    length = req.arg("length", PAGE_SIZE)
    perms: PermSet = req.arg("perms", PermSet(r=True))
    if perms.w and perms.x:
        raise PolicyDenied("WXViolation")
    pages = _own_range(state, caller, addr, length)
    records = {p: state.pages[p] for p in pages}
    if state.exec_locked and (perms.x or any(r.attr is PageAttr.EXEC for r in records.values())):
        raise PolicyDenied("ExecLocked")
    updates: dict[int, PageRecord] = {}
    mappings = state.file_mappings
    if perms.x:
        for page, rec in records.items():
            if rec.attr in (PageAttr.SHARED, PageAttr.DOMAIN_PRIVATE):
                raise PolicyDenied("SharedToExec", f"page {page:#x}")
            if rec.attr is PageAttr.RETIRED:
                hit = code_scan(state.page_bytes.get(page, b""), state.config.scan_syscall_opcode)
                if hit is not None:
                    raise PolicyDenied("ScanFailed", f"forbidden opcode at {hit}")
        for page, rec in records.items():
            updates[page] = replace(rec, perms=perms, attr=PageAttr.EXEC, backing=None)
        lo, hi = addr, addr + length
        mappings = tuple(mf for mf in mappings if not (lo <= mf.addr and mf.addr + mf.length <= hi))
    else:
        for page, rec in records.items():
            attr = PageAttr.RETIRED if rec.attr is PageAttr.EXEC else rec.attr
            updates[page] = replace(rec, perms=perms, attr=attr)
    return state.with_pages(updates).evolve(file_mappings=mappings), 0


def _munmap(state: MachineState, req: SyscallRequest, caller: DomainId) -> tuple[MachineState, int]:
    addr = req.arg("addr")
    length = req.arg("length", PAGE_SIZE)
    pages = _own_range(state, caller, addr, length)
    if state.exec_locked and any(state.pages[p].attr is PageAttr.EXEC for p in pages):
        raise PolicyDenied("ExecLocked")
    lo, hi = addr, addr + length
    mappings = tuple(mf for mf in state.file_mappings if not (mf.addr < hi and lo < mf.addr + mf.length))
    page_bytes = {p: b for p, b in state.page_bytes.items() if p not in set(pages)}
    live_fds = {mf.fd for mf in mappings}
    closed = frozenset(fd for fd in state.closed_mapped_fds if fd in live_fds)
    return (
        state.with_pages({}, removes=pages).evolve(
            file_mappings=mappings, page_bytes=page_bytes, closed_mapped_fds=closed
        ),
        0,
    )


def _mremap(state: MachineState, req: SyscallRequest, caller: DomainId) -> tuple[MachineState, int]:
    old = req.arg("addr")
    old_len = req.arg("length", PAGE_SIZE)
    new = req.arg("new_addr")
    new_len = req.arg("new_length", old_len)
    old_pages = _own_range(state, caller, old, old_len)
    if any(state.pages[p].attr is PageAttr.EXEC for p in old_pages):
        raise PolicyDenied("ExecRelocation", "moving validated code")
    for page in page_span(new, new_len):
        rec = state.pages.get(page)
        if rec is not None:
            if rec.attr is PageAttr.EXEC:
                raise PolicyDenied("ExecRelocation", f"target page {page:#x} is executable")
            if rec.domain != caller:
                raise PolicyDenied("ForeignDomain", f"page {page:#x}")
    updates: dict[int, PageRecord] = {}
    page_bytes = dict(state.page_bytes)
    for i, page in enumerate(page_span(new, new_len)):
        if i < len(old_pages):
            src = old_pages[i]
            updates[page] = state.pages[src]
            if src in page_bytes:
                page_bytes[page] = page_bytes.pop(src)
        else:
            updates[page] = PageRecord(caller, PermSet(r=True, w=True), PageAttr.RETIRED)
    mappings = tuple(
        replace(mf, addr=new) if mf.addr == old else mf for mf in state.file_mappings
    )
    state = state.with_pages(updates, removes=[p for p in old_pages if p not in updates])
    return state.evolve(page_bytes=page_bytes, file_mappings=mappings), new


# -- process ops -----------------------------------------------------------------


def proc_ops(state: MachineState, req: SyscallRequest, snap: ArgSnapshot) -> tuple[MachineState, int]:
    name = req.name
    if name in ("fork", "vfork"):
        return _fork(state, req.tid, snap.caller_domain)
    if name == "clone":
        flags = frozenset(req.arg("flags", ()))
        if "vm" in flags and "thread" not in flags:
            raise PolicyDenied("ForbiddenCloneFlags", "shared-VM clone without thread semantics")
        if "thread" in flags:
            state, new_tid = spawn_thread(state, req.tid, via_queen=bool(req.arg("via_queen", True)))
            return state, new_tid
        return _fork(state, req.tid, snap.caller_domain)
    if name == "execve":
        return _exec(state, req.tid)
    if name in ("process_vm_readv", "process_vm_writev"):
        target_pid = req.arg("pid", state.pid)
        if target_pid != state.pid:
            raise PolicyDenied("CrossProcessMemory", f"pid {target_pid}")
        addr = req.arg("addr", 0)
        length = req.arg("length", 1)
        verdict = _page_domain_verdict(state, snap.caller_domain, addr, length)
        if verdict is ScreenVerdict.POINTS_INTO_TRUSTED:
            raise PolicyDenied("PointsIntoTrusted", f"{addr:#x}")
        if verdict is not ScreenVerdict.OK:
            raise PolicyDenied("PointsIntoForeignDomain", f"{addr:#x}")
        return state, length
    raise UnknownSyscall(name)


def _fork(state: MachineState, tid: int, caller: DomainId) -> tuple[MachineState, int]:
    child_pid = state.next_child_pid
    # The child resumes at the syscall return point, back in the caller domain.
    thread = state.threads[tid]
    resumed = replace(thread, current_domain=caller, pkru=state.pkru_for(caller), in_monitor=False)
    child = state.with_thread(resumed).evolve(
        children=(), pid=child_pid, next_child_pid=child_pid * 10 + 1
    )
    state = state.evolve(children=state.children + (child,), next_child_pid=child_pid + 1)
    return state, child_pid


def _exec(state: MachineState, tid: int) -> tuple[MachineState, int]:
    thread = state.threads[tid]
    monitor_pages = {p: r for p, r in state.pages.items() if r.domain.is_trusted}
    fresh = state.evolve(
        pages=monitor_pages,
        page_bytes={},
        words={},
        file_mappings=(),
        closed_mapped_fds=frozenset(),
        threads={},
        next_tid=tid + 1,
        trampoline=callgate.TrampolineState(
            regions={}, shadow_stacks={}, endbr_set=state.trampoline.endbr_set
        ),
        signals=sigmod.SignalState(),
        locks=LockTable(),
        domains=type(state.domains)(),
        exec_locked=False,
    )
    ctx = replace(
        thread,
        current_domain=TRUSTED,
        pkru=fresh.pkru_for(TRUSTED),
        in_monitor=True,
        sig_blocked=False,
        stack_domain=TRUSTED,
        active_frame=None,
        return_chain=(),
    )
    fresh = fresh.with_thread(ctx)
    fresh = callgate.attach_thread(fresh, tid)
    stack_page = page_of(fresh.user_stack_addr(tid))
    fresh = fresh.with_pages({stack_page: PageRecord(APP_DOMAIN, PermSet(r=True, w=True), PageAttr.RETIRED)})
    return fresh, 0


def spawn_thread(state: MachineState, parent_tid: int, via_queen: bool = True) -> tuple[MachineState, int]:
    """Create a simulated thread with its own trampoline region and filter.

    Under a seccomp filter new threads must be spawned by the filter-free Queen
    thread, which installs a fresh per-thread filter; a direct clone would
    inherit the parent's immutable filter and is rejected.
    """
    from .config import FilterKind

    if state.config.gate.filter is FilterKind.SECCOMP and not via_queen:
        raise PolicyDenied("QueenRequired", "direct clone would inherit the parent's filter")
    parent = state.threads[parent_tid]
    tid = state.next_tid
    stack_page = page_of(state.user_stack_addr(tid))
    domain = parent.current_domain if not parent.current_domain.is_trusted else APP_DOMAIN
    ctx = replace(
        parent,
        tid=tid,
        current_domain=domain,
        pkru=state.pkru_for(domain),
        in_monitor=False,
        sig_blocked=False,
        active_frame=None,
        return_chain=(),
        stack_domain=domain,
    )
    state = state.with_thread(ctx).evolve(next_tid=tid + 1)
    state = state.with_pages({stack_page: PageRecord(domain, PermSet(r=True, w=True), PageAttr.RETIRED)})
    return callgate.attach_thread(state, tid), tid


# -- signal-class syscalls ---------------------------------------------------------


def signal_ops(state: MachineState, req: SyscallRequest, snap: ArgSnapshot) -> tuple[MachineState, int]:
    name = req.name
    tid = req.tid
    if name == "rt_sigaction":
        state = sigmod.vsigaction(state, req.arg("signo"), req.arg("handler"), frozenset(req.arg("mask", ())))
        return state, 0
    if name == "rt_sigprocmask":
        state = sigmod.set_user_mask(state, frozenset(req.arg("mask", ())))
        return state, 0
    if name == "sigaltstack":
        state = sigmod.set_altstack(state, tid, req.arg("addr", 0))
        return state, 0
    if name == "rt_sigreturn":
        tamper = req.arg("tamper")
        presented = TRUSTED if tamper == "pkru" else None
        state = sigmod.vsigreturn(state, tid, presented_pkru=presented)
        return state, 0
    if name == "kill":
        signo = req.arg("signo")
        state = sigmod.kernel_deliver(state, tid, signo, sigmod.SigContext.IN_MONITOR)
        return state, 0
    raise UnknownSyscall(name)


HANDLERS: dict[str, Callable[[MachineState, SyscallRequest, ArgSnapshot], tuple[MachineState, int]]] = {
    "file": file_ops,
    "memory": mem_ops,
    "process": proc_ops,
    "signal": signal_ops,
}


def _passthrough(state: MachineState, req: SyscallRequest, snap: ArgSnapshot) -> tuple[MachineState, int]:
    """Forward to the kernel; protection keys stay those of the caller.

    Raw (untagged) addresses the kernel dereferences hit MPK enforcement even
    from supervisor mode, so an access into a page the caller's key forbids
    faults instead of leaking.
    """
    kernel_addr = req.arg("kernel_addr")
    if kernel_addr is not None:
        rec = state.pages.get(page_of(kernel_addr))
        if rec is None or rec.domain != snap.caller_domain:
            raise KernelFault("MpkFault", f"kernel access to {kernel_addr:#x}")
    if req.name == "rename":
        src, dst = req.arg("src_path"), req.arg("dst_path")
        if src is not None and dst is not None and src in state.fs.paths:
            paths = dict(state.fs.paths)
            paths[dst] = paths.pop(src)
            state = state.evolve(fs=replace(state.fs, paths=paths))
    return state, 0


PHASES = ("enter", "screen", "handle", "exit")


@dataclass(frozen=True)
class InFlight:
    """Monitor-side context of one syscall between gate entry and exit."""

    req: SyscallRequest
    caller: DomainId
    snap: ArgSnapshot | None = None
    lock_names: tuple[str, ...] = ()
    locks_held: bool = False
    status: ResultStatus | None = None  # set once the verdict is known
    reason: str | None = None
    value: int = 0
    resume: DomainId | None = None


def phase_enter(state: MachineState, req: SyscallRequest) -> tuple[MachineState, InFlight]:
    thread = state.threads[req.tid]
    if thread.current_domain.is_trusted:
        raise PolicyDenied("MonitorContext", "dispatch requires an untrusted caller")
    caller = thread.current_domain
    state = callgate.gate_enter(state, req.tid)
    thread = state.threads[req.tid]
    state = state.with_thread(
        replace(thread, current_domain=TRUSTED, pkru=state.pkru_for(TRUSTED), in_monitor=True)
    )
    return state, InFlight(req=req, caller=caller)


def phase_screen(state: MachineState, flight: InFlight) -> tuple[MachineState, InFlight]:
    snap = screen_args(state, flight.req, flight.caller)
    flight = replace(flight, snap=snap)
    if snap.verdict is not ScreenVerdict.OK:
        flight = replace(flight, status=ResultStatus.DENIED, reason=snap.verdict.value)
    return state, flight


def phase_handle(state: MachineState, flight: InFlight) -> tuple[MachineState, InFlight] | None:
    """Classify, lock, and run the handler. Returns None when blocked on a lock."""
    from .domains import domain_ops

    req = flight.req
    if flight.status is not None:  # screening already decided
        return state, flight
    try:
        cls = classify(state.config, req.name)
    except UnknownSyscall:
        if req.name in domain_ops():
            cls = SyscallClass(SyscallKind.VIRTUALIZED, "domain")
        else:
            return state, replace(flight, status=ResultStatus.DENIED, reason="UnknownSyscall")
    if cls.kind is SyscallKind.DENIED:
        return state, replace(flight, status=ResultStatus.DENIED, reason="ForbiddenSyscall")
    lock_names = locks_needed(cls.handler, req)
    locked = try_acquire(state, lock_names, req.tid)
    if locked is None:
        return None
    state = locked
    flight = replace(flight, lock_names=lock_names, locks_held=True)
    try:
        if cls.kind is SyscallKind.PASSTHROUGH:
            state, value = _passthrough(state, req, flight.snap)
            return state, replace(flight, status=ResultStatus.OK, value=value)
        if cls.handler == "domain":
            state, value, resume_override = domain_ops()[req.name](state, req, flight.snap)
            return state, replace(flight, status=ResultStatus.OK, value=value, resume=resume_override)
        state, value = HANDLERS[cls.handler](state, req, flight.snap)
        return state, replace(flight, status=ResultStatus.OK, value=value)
    except PolicyDenied as exc:
        return state, replace(flight, status=ResultStatus.DENIED, reason=exc.reason)
    except KernelFault as exc:
        return state, replace(flight, status=ResultStatus.FAULT, reason=exc.reason)


def phase_exit(state: MachineState, flight: InFlight) -> tuple[MachineState, SyscallResult]:
    req = flight.req
    if flight.locks_held:
        state = release(state, flight.lock_names, req.tid)
    status = flight.status if flight.status is not None else ResultStatus.OK
    reason = flight.reason
    try:
        state = callgate.gate_exit(state, req.tid)
    except KernelFault as exc:
        status, reason = ResultStatus.FAULT, exc.reason
    resume = flight.resume if (flight.resume is not None and status is ResultStatus.OK) else flight.caller
    thread = state.threads[req.tid]
    state = state.with_thread(
        replace(thread, current_domain=resume, pkru=state.pkru_for(resume), in_monitor=False)
    )
    if status is ResultStatus.OK and state.ring_of(resume) is MachineState.APP_RING:
        state = sigmod.deliver_best(state, req.tid, rax=flight.value)
    return state, SyscallResult(
        status, value=flight.value, reason=reason, locks_taken=flight.lock_names
    )


def dispatch(state: MachineState, req: SyscallRequest) -> tuple[MachineState, SyscallResult]:
    """Run one syscall through the full monitor sequence atomically.

    Returns the committed state on success; on denial or fault the original
    state object is returned untouched. Either way the result records the two
    PKRU transitions of the gate round trip.
    """
    original = state
    if state.terminated:
        return original, SyscallResult(ResultStatus.DENIED, reason="Terminated")
    state, flight = phase_enter(state, req)
    state, flight = phase_screen(state, flight)
    handled = phase_handle(state, flight)
    if handled is None:
        # Sequential execution never contends; the explorer handles blocking.
        return original, SyscallResult(ResultStatus.DENIED, reason="LockContended")
    state, flight = handled
    state, result = phase_exit(state, flight)
    if result.status is not ResultStatus.OK:
        return original, result
    return state, result


def monitor_audit(state: MachineState) -> list[str]:
    """Re-check the mapping policies independently of the formal safety check."""
    problems: list[str] = []
    for page in sorted(state.pages):
        rec = state.pages[page]
        if rec.perms.w and rec.perms.x:
            problems.append(f"W+X page {page:#x}")
        if rec.attr is PageAttr.EXEC and rec.backing is not None:
            problems.append(f"file-backed executable page {page:#x}")
    per_fd: dict[int, list] = {}
    for mf in state.file_mappings:
        per_fd.setdefault(mf.fd, []).append(mf)
    for fd, group in per_fd.items():
        for a, b in itertools.combinations(sorted(group, key=lambda m: m.off), 2):
            if a.off + a.length <= b.off:
                continue
            ra, rb = state.pages.get(page_of(a.addr)), state.pages.get(page_of(b.addr))
            if ra and rb and ra.domain != rb.domain:
                problems.append(f"fd {fd}: cross-domain alias at offsets {a.off}/{b.off}")
    return problems
