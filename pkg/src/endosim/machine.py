"""The formal machine state and its safety predicates.

A state bundles the mapped pages with their permissions and attributes, the
file-mapping records, the open-file table, the filesystem view, the simulated
threads, plus the gate, signal, lock, and domain sub-states. States are
immutable; every transition produces a fresh state via :meth:`MachineState.evolve`
and the four safety predicates are re-checked after each commit.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Iterable, Mapping

from . import callgate, signals as sigmod
from ._util import evolve as _evolve
from .config import PAGE_SIZE, SimConfig, default_config
from .rng import RngState, seed_state

Addr = int


def page_of(addr: Addr) -> int:
    return addr // PAGE_SIZE


def page_span(addr: Addr, length: int) -> range:
    """Pages covered by the half-open byte interval [addr, addr+length)."""
    if length <= 0:
        return range(0)
    return range(page_of(addr), page_of(addr + length - 1) + 1)


def round_up_pages(length: int) -> int:
    return (length + PAGE_SIZE - 1) // PAGE_SIZE


@dataclass(frozen=True)
class PermSet:
    r: bool = False
    w: bool = False
    x: bool = False

    @staticmethod
    def parse(text: str) -> PermSet:
        text = text.lower()
        bad = set(text) - set("rwx-")
        if bad:
            raise ValueError(f"bad permission letters: {sorted(bad)}")
        return PermSet("r" in text, "w" in text, "x" in text)

    def __str__(self) -> str:
        return ("r" if self.r else "-") + ("w" if self.w else "-") + ("x" if self.x else "-")


@dataclass(frozen=True, order=True)
class DomainId:
    """Trusted monitor domain, or one of up to 14 untrusted domains."""

    index: int  # -1 = trusted

    @property
    def is_trusted(self) -> bool:
        return self.index < 0

    @staticmethod
    def untrusted(index: int) -> DomainId:
        if not 0 <= index < 14:
            raise ValueError("untrusted domain index must be in 0..13")
        return DomainId(index)

    def __str__(self) -> str:
        return "trusted" if self.is_trusted else f"untrusted{self.index}"


TRUSTED = DomainId(-1)
APP_DOMAIN = DomainId.untrusted(0)


class Ring(IntEnum):
    """Virtual privilege rings, most privileged first."""

    MONITOR = 3
    SAFEBOX = 2
    UNBOX = 1
    SANDBOX = 0


class PageAttr(Enum):
    EXEC = "exec"  # validated, executable, not writable
    RETIRED = "retired"  # mapped once, not executable, promotable
    SHARED = "shared"  # possibly shared, never becomes executable
    DOMAIN_PRIVATE = "domain_private"  # subdomain data page, never promotable


@dataclass(frozen=True)
class PageRecord:
    domain: DomainId
    perms: PermSet
    attr: PageAttr
    backing: tuple[int, int] | None = None  # (inode, file offset)


@dataclass(frozen=True)
class FileMappingRecord:
    fd: int
    off: int
    length: int
    addr: Addr

    def intersects(self, other: FileMappingRecord) -> bool:
        return self.off < other.off + other.length and other.off < self.off + self.length


@dataclass(frozen=True)
class OpenFile:
    fd: int
    inode: int
    path: str
    offset: int = 0
    sensitive: bool = False


@dataclass(frozen=True)
class LockTable:
    """Monitor-internal locks; holders are thread ids."""

    per_fd: Mapping[int, int] = field(default_factory=dict)  # fd -> holder tid
    mapping_global: int | None = None
    signal_global: int | None = None


@dataclass(frozen=True)
class ReturnFrame:
    caller_domain: DomainId
    caller_stack: DomainId
    tid: int


@dataclass(frozen=True)
class ThreadCtx:
    tid: int
    current_domain: DomainId
    pkru: Mapping[DomainId, tuple[bool, bool]]  # domain -> (read, write)
    in_monitor: bool = False
    sig_blocked: bool = False
    stack_domain: DomainId = APP_DOMAIN
    active_frame: int | None = None
    return_chain: tuple[ReturnFrame, ...] = ()


@dataclass(frozen=True)
class Filesystem:
    paths: Mapping[str, int]
    sensitive_inodes: frozenset[int]
    next_inode: int


@dataclass(frozen=True)
class Compartment:
    """A created subprocess domain: key, subspaces, entrypoints, stubs, stack."""

    domain: DomainId
    ring: Ring
    name: str
    code_pages: frozenset[int]
    data_pages: frozenset[int]
    entrypoints: Mapping[int, Addr]
    stub: Addr
    stubs: tuple[Addr, ...]
    stack_page: int


@dataclass(frozen=True)
class GrantRecord:
    page: int
    owner: DomainId
    grantee: DomainId
    active: bool = True


@dataclass(frozen=True)
class DomainTable:
    compartments: Mapping[int, Compartment] = field(default_factory=dict)
    grants: tuple[GrantRecord, ...] = ()

    def ring_of(self, domain: DomainId) -> Ring:
        if domain.is_trusted:
            return Ring.MONITOR
        comp = self.compartments.get(domain.index)
        return comp.ring if comp is not None else Ring.UNBOX

    def grant_active(self, page: int, domain: DomainId) -> bool:
        return any(g.active and g.page == page and g.grantee == domain for g in self.grants)


_PKRU_TRUSTED_CACHE: dict = {}
_PKRU_UNTRUSTED_CACHE: dict = {}


class SafetyProperty(Enum):
    """The four safety predicates every committed state must satisfy."""

    TRUSTED_READABLE = "trusted-readable"  # untrusted execution can read monitor memory
    TRUSTED_WRITABLE = "trusted-writable"  # untrusted execution can write monitor memory
    WRITE_EXEC = "write-exec"  # a page is writable and executable
    ALIASED_MAPPING = "aliased-mapping"  # one file region mapped into two domains


@dataclass(frozen=True)
class Violation:
    prop: SafetyProperty
    detail: str


@dataclass(frozen=True)
class SafetyVerdict:
    violations: tuple[Violation, ...] = ()

    @property
    def safe(self) -> bool:
        return not self.violations


# Fixed monitor layout.
MONITOR_CODE_PAGE = 0x100
MONITOR_DATA_PAGE = 0x101
MONITOR_ENTRY = MONITOR_CODE_PAGE * PAGE_SIZE + 0x10
USER_STACK_BASE_PAGE = 0x800
USER_MAP_BASE_PAGE = 0x1000
STUB_BASE = MONITOR_CODE_PAGE * PAGE_SIZE + 0x400


@dataclass(frozen=True)
class MachineState:
    config: SimConfig
    pages: Mapping[int, PageRecord]
    page_bytes: Mapping[int, bytes]
    words: Mapping[Addr, int]
    file_mappings: tuple[FileMappingRecord, ...]
    open_files: Mapping[int, OpenFile]
    closed_mapped_fds: frozenset[int]
    next_fd: int
    fs: Filesystem
    threads: Mapping[int, ThreadCtx]
    next_tid: int
    trampoline: callgate.TrampolineState
    signals: sigmod.SignalState
    locks: LockTable
    domains: DomainTable
    children: tuple[MachineState, ...]
    rng: RngState
    pid: int = 1000
    next_child_pid: int = 1001
    next_map_page: int = USER_MAP_BASE_PAGE
    exec_locked: bool = False
    terminated: bool = False

    APP_RING = Ring.UNBOX

    def evolve(self, **changes) -> MachineState:
        return _evolve(self, **changes)

    # -- small update helpers ------------------------------------------------

    def with_thread(self, ctx: ThreadCtx) -> MachineState:
        return self.evolve(threads={**self.threads, ctx.tid: ctx})

    def with_pages(self, updates: Mapping[int, PageRecord], removes: Iterable[int] = ()) -> MachineState:
        pages = {**self.pages, **updates}
        for p in removes:
            pages.pop(p, None)
        return self.evolve(pages=pages)

    def ring_of(self, domain: DomainId) -> Ring:
        return self.domains.ring_of(domain)

    def live_domains(self) -> tuple[DomainId, ...]:
        live: set[DomainId] = {TRUSTED, APP_DOMAIN}
        live.update(DomainId.untrusted(i) for i in self.domains.compartments)
        return tuple(sorted(live))

    def pkru_for(self, domain: DomainId) -> Mapping[DomainId, tuple[bool, bool]]:
        """The PKRU image installed when a thread runs in ``domain``.

        The monitor gets read/write on every domain; an untrusted domain gets
        only itself (page grants are tracked separately at page granularity).
        """
        if domain.is_trusted:
            key = tuple(sorted(self.domains.compartments))
            cached = _PKRU_TRUSTED_CACHE.get(key)
            if cached is None:
                live = [TRUSTED, APP_DOMAIN] + [DomainId.untrusted(i) for i in key]
                cached = {d: (True, True) for d in live}
                _PKRU_TRUSTED_CACHE[key] = cached
            return cached
        cached = _PKRU_UNTRUSTED_CACHE.get(domain.index)
        if cached is None:
            cached = {domain: (True, True)}
            _PKRU_UNTRUSTED_CACHE[domain.index] = cached
        return cached

    def user_stack_addr(self, tid: int) -> Addr:
        return (USER_STACK_BASE_PAGE + tid) * PAGE_SIZE

    # -- access predicates ---------------------------------------------------

    def can_read(self, tid: int, addr: Addr) -> bool:
        return self._access(tid, addr, write=False)

    def can_write(self, tid: int, addr: Addr) -> bool:
        return self._access(tid, addr, write=True)

    def _access(self, tid: int, addr: Addr, write: bool) -> bool:
        rec = self.pages.get(page_of(addr))
        if rec is None:
            return False
        thread = self.threads[tid]
        perm_ok = rec.perms.w if write else rec.perms.r
        if not perm_ok:
            return False
        dom = thread.current_domain
        if dom.is_trusted or rec.domain == dom:
            return True
        return self.domains.grant_active(page_of(addr), dom)


def pkru_readable(thread: ThreadCtx, rec: PageRecord) -> bool:
    """readable(a): the PKRU grants read on the page's domain and the page has R."""
    grant = thread.pkru.get(rec.domain, (False, False))
    return grant[0] and rec.perms.r


def pkru_writeable(thread: ThreadCtx, rec: PageRecord) -> bool:
    grant = thread.pkru.get(rec.domain, (False, False))
    return grant[1] and rec.perms.w


def safety_check(state: MachineState) -> SafetyVerdict:
    """Evaluate the four safety predicates; a pure function of the state."""
    out: list[Violation] = []
    untrusted_threads = [t for t in state.threads.values() if not t.current_domain.is_trusted]
    for page, rec in state.pages.items():
        if rec.domain.is_trusted:
            for thread in untrusted_threads:
                if pkru_readable(thread, rec):
                    out.append(
                        Violation(SafetyProperty.TRUSTED_READABLE, f"page {page:#x} readable by tid {thread.tid}")
                    )
                if pkru_writeable(thread, rec):
                    out.append(
                        Violation(SafetyProperty.TRUSTED_WRITABLE, f"page {page:#x} writable by tid {thread.tid}")
                    )
        if rec.perms.w and rec.perms.x:
            out.append(Violation(SafetyProperty.WRITE_EXEC, f"page {page:#x} is W and X"))
    by_fd: dict[int, list[FileMappingRecord]] = {}
    for mf in state.file_mappings:
        by_fd.setdefault(mf.fd, []).append(mf)
    for fd, records in by_fd.items():
        for i, a in enumerate(records):
            for b in records[i + 1 :]:
                if not a.intersects(b):
                    continue
                dom_a = state.pages.get(page_of(a.addr))
                dom_b = state.pages.get(page_of(b.addr))
                if dom_a is None or dom_b is None:
                    continue
                if dom_a.domain != dom_b.domain:
                    out.append(
                        Violation(
                            SafetyProperty.ALIASED_MAPPING,
                            f"fd {fd} mapped at {a.addr:#x} ({dom_a.domain}) and {b.addr:#x} ({dom_b.domain})",
                        )
                    )
    return SafetyVerdict(tuple(out))


def structural_audit(state: MachineState) -> list[str]:
    """Internal representation invariants, independent of the safety predicates."""
    problems: list[str] = []
    for page, rec in state.pages.items():
        if rec.perms.x and rec.backing is not None:
            problems.append(f"executable page {page:#x} is file-backed")
        if rec.perms.x and rec.attr is not PageAttr.EXEC:
            problems.append(f"executable page {page:#x} has attr {rec.attr.value}")
        if rec.attr is PageAttr.SHARED and rec.perms.x:
            problems.append(f"shared page {page:#x} is executable")
    for mf in state.file_mappings:
        if mf.fd not in state.open_files and mf.fd not in state.closed_mapped_fds:
            problems.append(f"mapping record for unknown fd {mf.fd}")
    problems.extend(sigmod.queue_invariant_violations(state.signals))
    for thread in state.threads.values():
        if thread.in_monitor != thread.current_domain.is_trusted:
            problems.append(f"tid {thread.tid}: in_monitor flag disagrees with domain")
    return problems


def new_initial(config: SimConfig | None = None, seed: int = 0) -> MachineState:
    """The boot state: monitor loaded, nothing opened or mapped, domain trusted."""
    config = config or default_config()
    pages = {
        MONITOR_CODE_PAGE: PageRecord(TRUSTED, PermSet(r=True, x=True), PageAttr.EXEC),
        MONITOR_DATA_PAGE: PageRecord(TRUSTED, PermSet(r=True, w=True), PageAttr.RETIRED),
    }
    paths = {}
    sensitive = set()
    next_inode = 1
    for path in config.sensitive_paths:
        paths[path] = next_inode
        sensitive.add(next_inode)
        next_inode += 1
    state = MachineState(
        config=config,
        pages=pages,
        page_bytes={},
        words={},
        file_mappings=(),
        open_files={},
        closed_mapped_fds=frozenset(),
        next_fd=3,
        fs=Filesystem(paths=paths, sensitive_inodes=frozenset(sensitive), next_inode=next_inode),
        threads={},
        next_tid=1,
        trampoline=callgate.TrampolineState(regions={}, shadow_stacks={}, endbr_set=frozenset({MONITOR_ENTRY})),
        signals=sigmod.SignalState(),
        locks=LockTable(),
        domains=DomainTable(),
        children=(),
        rng=seed_state(seed),
    )
    thread0 = ThreadCtx(
        tid=0,
        current_domain=TRUSTED,
        pkru=state.pkru_for(TRUSTED),
        in_monitor=True,
        stack_domain=TRUSTED,
    )
    state = state.with_thread(thread0)
    return callgate.attach_thread(state, 0)


def start_user(state: MachineState) -> MachineState:
    """Monitor initialization done: map the app stack and drop to the app domain."""
    thread = state.threads[0]
    stack_page = page_of(state.user_stack_addr(0))
    state = state.with_pages({stack_page: PageRecord(APP_DOMAIN, PermSet(r=True, w=True), PageAttr.RETIRED)})
    dropped = replace(
        thread,
        current_domain=APP_DOMAIN,
        pkru=state.pkru_for(APP_DOMAIN),
        in_monitor=False,
        stack_domain=APP_DOMAIN,
    )
    return state.with_thread(dropped)
