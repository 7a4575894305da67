"""Random well-formed syscall traces for safety fuzzing.

Every generated transition is applied through the normal commit protocol, so
each step re-checks the safety predicates; a trace that survives has zero
violations on every committed state by construction, and the harness asserts
the ephemeral byte invariant at each commit on top.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from . import transitions as tr
from .callgate import ByteClass
from .config import GateVariant, SimConfig, default_config
from .errors import SafetyBreachError
from .machine import MachineState, new_initial, start_user
from .machine import MONITOR_CODE_PAGE, PAGE_SIZE, PermSet
from .syscalls import PointerArg

VARIANT_CYCLE = ("secc_rand:32", "secc_eph", "disp_eph", "secc_cet", "disp_cet")

_PATHS = ("/tmp/a", "/tmp/b", "/var/data", "/etc/app.conf", "/proc/self/mem")
_PERMS = ("r", "rw", "rx", "rwx", "rw")


@dataclass
class FuzzStats:
    steps: int = 0
    committed: int = 0
    denials: int = 0
    faults: int = 0
    breaches: int = 0
    ephemeral_checks: int = 0


def _random_syscall(rng: random.Random, state: MachineState, next_addr: list[int]) -> tr.Transition:
    tid = 0
    fds = [fd for fd in state.open_files]
    choice = rng.randrange(100)
    if choice < 18:
        return tr.syscall(tid, "open", path=rng.choice(_PATHS))
    if choice < 34 and fds:
        fd = rng.choice(fds)
        name = rng.choice(("read", "write", "lseek", "fstat", "dup"))
        params = {"fd": fd}
        if name in ("read", "write"):
            params["length"] = rng.randrange(1, 4096)
        if name == "lseek":
            params["offset"] = rng.randrange(0, 1 << 20)
        return tr.syscall(tid, name, **params)
    if choice < 40 and fds:
        return tr.syscall(tid, "close", fd=rng.choice(fds))
    if choice < 58:
        perms = PermSet.parse(rng.choice(_PERMS))
        params = {"length": rng.choice((1, 2, 4)) * PAGE_SIZE, "perms": perms}
        if rng.random() < 0.3:
            params["shared"] = True
        if rng.random() < 0.25 and fds:
            params["fd"] = rng.choice(fds)
            params["offset"] = rng.randrange(4) * PAGE_SIZE
        if rng.random() < 0.1:
            params["addr"] = MONITOR_CODE_PAGE * PAGE_SIZE  # poke at the monitor
        return tr.syscall(tid, "mmap", **params)
    if choice < 70:
        pages = sorted(
            p for p, rec in state.pages.items() if not rec.domain.is_trusted and p >= 0x1000
        )
        if pages:
            page = rng.choice(pages)
            name = rng.choice(("mprotect", "mprotect", "munmap"))
            perms = PermSet.parse(rng.choice(_PERMS))
            return tr.syscall(tid, name, addr=page * PAGE_SIZE, length=PAGE_SIZE, perms=perms)
        return tr.syscall(tid, "getppid")
    if choice < 76:
        name = rng.choice(("ptrace", "seccomp", "pkey_alloc", "modify_ldt", "shmat", "prctl"))
        return tr.syscall(tid, name)
    if choice < 82:
        name = rng.choice(("getppid", "getpid", "gettid", "nanosleep", "uname", "brk"))
        return tr.syscall(tid, name)
    if choice < 88:
        # Pointer argument that sometimes lands in monitor memory.
        addr = MONITOR_CODE_PAGE * PAGE_SIZE if rng.random() < 0.5 else state.user_stack_addr(tid)
        return tr.syscall(tid, "rename", src_path="/tmp/a", dst_path="/tmp/z", src=PointerArg(addr, 8))
    if choice < 90:
        return tr.syscall(tid, "rt_sigaction", signo=rng.choice((2, 10, 15)), handler=0x800200)
    if choice < 94:
        signo = rng.choice((2, 10, 15))
        if signo not in state.signals.table:
            # Unhandled signals default-terminate; register instead.
            return tr.syscall(tid, "rt_sigaction", signo=signo, handler=0x800200)
        return tr.kernel_signal(tid, signo)
    if choice < 97:
        addr = MONITOR_CODE_PAGE * PAGE_SIZE if rng.random() < 0.5 else state.user_stack_addr(tid)
        return tr.syscall(tid, "ioctl", kernel_addr=addr)
    if state.threads[tid].active_frame is not None:
        return tr.syscall(tid, "rt_sigreturn")
    return tr.syscall(tid, "getppid")


def _assert_ephemeral_commit(state: MachineState, stats: FuzzStats) -> None:
    if state.config.gate.variant is not GateVariant.EPHEMERAL:
        return
    if any(not t.current_domain.is_trusted for t in state.threads.values()):
        for tid, region in state.trampoline.regions.items():
            for _, cls in region.contents:
                if cls is ByteClass.SYSCALL:
                    raise SafetyBreachError(f"syscall byte live in tid {tid} region at commit")
        stats.ephemeral_checks += 1


def run_fuzz_trace(
    seed: int, syscalls_per_trace: int = 100, config: SimConfig | None = None, stats: FuzzStats | None = None
) -> FuzzStats:
    """One seeded trace; raises SafetyBreachError if any commit is unsafe."""
    stats = stats if stats is not None else FuzzStats()
    rng = random.Random(seed)
    variant = VARIANT_CYCLE[seed % len(VARIANT_CYCLE)]
    state = new_initial(config or default_config(variant), seed=seed)
    state = start_user(state)
    next_addr = [0]
    for _ in range(syscalls_per_trace):
        t = _random_syscall(rng, state, next_addr)
        try:
            state, result = tr.apply_transition(state, t)
        except SafetyBreachError:
            stats.breaches += 1
            raise
        stats.steps += 1
        if result.status is tr.Status.OK:
            stats.committed += 1
        elif result.status is tr.Status.DENIED:
            stats.denials += 1
        elif result.status is tr.Status.FAULT:
            stats.faults += 1
        _assert_ephemeral_commit(state, stats)
        if state.terminated:
            break
    return stats


def run_fuzz_corpus(traces: int, syscalls_per_trace: int = 100, base_seed: int = 0) -> FuzzStats:
    stats = FuzzStats()
    for i in range(traces):
        run_fuzz_trace(base_seed + i, syscalls_per_trace, stats=stats)
    return stats
