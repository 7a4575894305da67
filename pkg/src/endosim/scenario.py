"""Scenario scripts: a line-oriented grammar for driving the machine.

Setup lines declare the gate configuration, extra threads, and files; ``init``
lines run sequentially before the raced section; every remaining event line is
``<tid>: <verb> <args...> expect <ok|deny|fault|bypass>``. The sequential
runner executes events in file order; the interleaving explorer treats each
thread's events as its program and permutes schedules.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from . import machine, syscalls, transitions as tr
from .callgate import FIXED_GADGET_OFFSET
from .config import WRPKRU_PATTERN, SYSCALL_PATTERN, SimConfig, default_config, parse_variant
from .errors import SafetyBreachError, ScenarioParseError
from .machine import MachineState, PermSet, new_initial, safety_check, start_user
from .syscalls import PointerArg
from .transitions import StepResult, Transition

EXPECTATIONS = ("ok", "deny", "fault", "bypass")

_SCENARIO_VERBS = frozenset(
    {
        "open", "read", "write", "pread", "pwrite", "pwritev", "writev", "readv",
        "lseek", "close", "dup", "dup2", "fstat", "link", "rename", "mmap",
        "mprotect", "munmap", "mremap", "fork", "vfork", "exec", "clone",
        "pvm_read", "pvm_write", "child_open", "sigaction", "sigprocmask",
        "sigaltstack", "sigreturn", "kill", "signal", "forge_signal", "jump",
        "tsx", "tsx_attack", "forkbomb", "poke", "poke_bytes", "read_probe",
        "jump_into", "create_domain", "isolate_library", "xcall", "xreturn",
        "grant", "revoke", "ioctl",
    }
)


def known_verbs() -> frozenset[str]:
    """Everything an event line may start with: rich verbs plus policy-table names."""
    from .domains import domain_ops

    return _SCENARIO_VERBS | frozenset(default_config().syscall_table) | frozenset(domain_ops())


@dataclass(frozen=True)
class Event:
    tid: int
    verb: str
    args: tuple[str, ...]
    kwargs: dict[str, str]
    expect: str
    line: int
    init: bool = False


@dataclass(frozen=True)
class Scenario:
    name: str
    variant: str | None
    files: tuple[tuple[str, bool], ...]
    spawns: tuple[int, ...]
    init_events: tuple[Event, ...]
    events: tuple[Event, ...]

    def thread_programs(self) -> dict[int, list[Event]]:
        programs: dict[int, list[Event]] = {}
        for ev in self.events:
            programs.setdefault(ev.tid, []).append(ev)
        return programs


def _parse_tid(token: str, line: int) -> int:
    if not token.startswith("t") or not token[1:].isdigit():
        raise ScenarioParseError(line, f"bad thread id {token!r}")
    return int(token[1:])


def _parse_event(tokens: list[str], line: int, init: bool) -> Event:
    if len(tokens) < 4 or tokens[-2] != "expect":
        raise ScenarioParseError(line, "event must end with 'expect <ok|deny|fault|bypass>'")
    expect = tokens[-1]
    if expect not in EXPECTATIONS:
        raise ScenarioParseError(line, f"unknown expectation {expect!r}")
    tid_tok = tokens[0]
    if not tid_tok.endswith(":"):
        raise ScenarioParseError(line, "event must start with '<tid>:'")
    tid = _parse_tid(tid_tok[:-1], line)
    verb = tokens[1]
    args: list[str] = []
    kwargs: dict[str, str] = {}
    for token in tokens[2:-2]:
        if "=" in token:
            key, value = token.split("=", 1)
            kwargs[key] = value
        else:
            args.append(token)
    return Event(tid=tid, verb=verb, args=tuple(args), kwargs=kwargs, expect=expect, line=line, init=init)


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    variant: str | None = None
    files: list[tuple[str, bool]] = []
    spawns: list[int] = []
    init_events: list[Event] = []
    events: list[Event] = []
    known_tids = {0}
    verbs = known_verbs()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "config":
            if len(tokens) != 2:
                raise ScenarioParseError(lineno, "config takes exactly one variant string")
            try:
                parse_variant(tokens[1])
            except ValueError as exc:
                raise ScenarioParseError(lineno, str(exc)) from None
            variant = tokens[1]
        elif head == "file":
            if len(tokens) not in (2, 3) or (len(tokens) == 3 and tokens[2] != "sensitive"):
                raise ScenarioParseError(lineno, "usage: file <path> [sensitive]")
            files.append((tokens[1], len(tokens) == 3))
        elif head == "spawn":
            if len(tokens) != 2:
                raise ScenarioParseError(lineno, "usage: spawn <tid>")
            tid = _parse_tid(tokens[1], lineno)
            spawns.append(tid)
            known_tids.add(tid)
        elif head == "init":
            ev = _parse_event(tokens[1:], lineno, init=True)
            if ev.tid not in known_tids:
                raise ScenarioParseError(lineno, f"thread t{ev.tid} used before spawn")
            if ev.verb not in verbs:
                raise ScenarioParseError(lineno, f"unknown verb {ev.verb!r}")
            init_events.append(ev)
        else:
            ev = _parse_event(tokens, lineno, init=False)
            if ev.tid not in known_tids:
                raise ScenarioParseError(lineno, f"thread t{ev.tid} used before spawn")
            if ev.verb not in verbs:
                raise ScenarioParseError(lineno, f"unknown verb {ev.verb!r}")
            events.append(ev)
    return Scenario(
        name=name,
        variant=variant,
        files=tuple(files),
        spawns=tuple(spawns),
        init_events=tuple(init_events),
        events=tuple(events),
    )


# -- value parsing ---------------------------------------------------------------


def _int(value: str) -> int:
    return int(value, 0)


def _content_bytes(token: str) -> bytes:
    if token == "clean":
        return b""
    if token.startswith("wrpkru@"):
        off = _int(token.split("@", 1)[1])
        return b"\x90" * off + WRPKRU_PATTERN
    if token.startswith("syscall@"):
        off = _int(token.split("@", 1)[1])
        return b"\x90" * off + SYSCALL_PATTERN
    return bytes.fromhex(token)


def resolve_target(state: MachineState, tid: int, token: str) -> int:
    """Resolve a jump/probe target, possibly relative to a thread's trampoline."""
    if "." in token:
        owner, rest = token.split(".", 1)
        base_tid = _parse_tid(owner, 0)
    else:
        base_tid, rest = tid, token
    try:
        return _int(rest)
    except ValueError:
        pass
    region = state.trampoline.region_of(base_tid)
    anchor = region.gadget_at if region.gadget_at is not None else FIXED_GADGET_OFFSET
    if rest == "gadget":
        return region.base + anchor
    if rest.startswith("gadget+"):
        return region.base + anchor + _int(rest.split("+", 1)[1])
    if rest.startswith("region+"):
        return region.base + _int(rest.split("+", 1)[1])
    raise ValueError(f"cannot resolve target {token!r}")


@dataclass
class RunEnv:
    """Mutable bookkeeping the runner keeps while executing one scenario."""

    domain_labels: dict[str, int] = field(default_factory=dict)


def _perms(token: str) -> PermSet:
    return PermSet.parse(token)


def event_transition(state: MachineState, ev: Event, env: RunEnv) -> Transition:
    """Compile one event into a transition against the current state."""
    tid, verb, kw = ev.tid, ev.verb, ev.kwargs

    def domain_index(token: str) -> int:
        if token in env.domain_labels:
            return env.domain_labels[token]
        return _int(token)

    if verb == "open":
        return tr.syscall(tid, "open", path=ev.args[0])
    if verb in ("read", "write", "pread", "pwrite"):
        name = {"pread": "pread64", "pwrite": "pwrite64"}.get(verb, verb)
        params: dict = {"fd": _int(kw["fd"]), "length": _int(kw.get("length", "64"))}
        if "buf" in kw:
            addr, _, length = kw["buf"].partition(":")
            params["buf"] = PointerArg(_int(addr), _int(length or "64"))
        return tr.syscall(tid, name, **params)
    if verb in ("pwritev", "writev", "readv"):
        return tr.syscall(
            tid, verb, fd=_int(kw["fd"]), iov=PointerArg(_int(kw["iov"]), 16, deref_words=2)
        )
    if verb == "lseek":
        return tr.syscall(tid, "lseek", fd=_int(kw["fd"]), offset=_int(kw.get("offset", "0")))
    if verb == "close":
        return tr.syscall(tid, "close", fd=_int(kw["fd"]))
    if verb in ("dup", "fstat"):
        return tr.syscall(tid, verb, fd=_int(kw["fd"]))
    if verb == "dup2":
        return tr.syscall(tid, "dup2", fd=_int(kw["fd"]), newfd=_int(kw["newfd"]))
    if verb == "link":
        return tr.syscall(tid, "link", old=kw["old"], new=kw["new"])
    if verb == "rename":
        params = {"src_path": kw.get("src"), "dst_path": kw.get("dst")}
        if "src_ptr" in kw:
            addr, _, length = kw["src_ptr"].partition(":")
            params["src"] = PointerArg(_int(addr), _int(length or "8"))
        return tr.syscall(tid, "rename", **params)
    if verb == "mmap":
        params = {
            "length": _int(kw.get("length", "4096")),
            "perms": _perms(kw.get("perms", "rw")),
            "shared": "shared" in ev.args,
        }
        if "addr" in kw:
            params["addr"] = _int(kw["addr"])
        if "fd" in kw:
            params["fd"] = _int(kw["fd"])
        if "offset" in kw:
            params["offset"] = _int(kw["offset"])
        if "content" in kw:
            params["content"] = _content_bytes(kw["content"])
        return tr.syscall(tid, "mmap", **params)
    if verb == "mprotect":
        return tr.syscall(
            tid,
            "mprotect",
            addr=_int(kw["addr"]),
            length=_int(kw.get("length", "4096")),
            perms=_perms(kw["perms"]),
        )
    if verb == "munmap":
        return tr.syscall(tid, "munmap", addr=_int(kw["addr"]), length=_int(kw.get("length", "4096")))
    if verb == "mremap":
        return tr.syscall(
            tid,
            "mremap",
            addr=_int(kw["addr"]),
            length=_int(kw.get("length", "4096")),
            new_addr=_int(kw["new_addr"]),
            new_length=_int(kw.get("new_length", kw.get("length", "4096"))),
        )
    if verb in ("fork", "vfork", "exec"):
        return tr.syscall(tid, {"exec": "execve"}.get(verb, verb))
    if verb == "clone":
        flags = [a for a in ev.args if a in ("vm", "thread")]
        return tr.syscall(tid, "clone", flags=tuple(flags), via_queen="direct" not in ev.args)
    if verb in ("pvm_read", "pvm_write"):
        name = "process_vm_readv" if verb == "pvm_read" else "process_vm_writev"
        params = {"addr": _int(kw.get("addr", "0")), "length": _int(kw.get("length", "8"))}
        if "pid" in kw:
            params["pid"] = _int(kw["pid"])
        return tr.syscall(tid, name, **params)
    if verb == "child_open":
        return tr.in_child(_int(kw.get("child", "0")), tr.syscall(0, "open", path=ev.args[0]))
    if verb == "sigaction":
        mask = tuple(_int(x) for x in kw.get("mask", "").split(",") if x)
        return tr.syscall(tid, "rt_sigaction", signo=_int(kw["signo"]), handler=_int(kw["handler"]), mask=mask)
    if verb == "sigprocmask":
        mask = tuple(_int(x) for x in kw.get("mask", "").split(",") if x)
        return tr.syscall(tid, "rt_sigprocmask", mask=mask)
    if verb == "sigaltstack":
        return tr.syscall(tid, "sigaltstack", addr=_int(kw["addr"]))
    if verb == "sigreturn":
        params = {"tamper": kw["tamper"]} if "tamper" in kw else {}
        return tr.syscall(tid, "rt_sigreturn", **params)
    if verb == "kill":
        return tr.syscall(tid, "kill", signo=_int(kw["signo"]))
    if verb == "signal":
        from .signals import SigContext

        # Both `signal 2 at monitor` and `signal 2 at=monitor` are accepted.
        phase = kw.get("at", "")
        if "at" in ev.args:
            phase = ev.args[ev.args.index("at") + 1]
        context = {
            "untrusted": SigContext.IN_UNTRUSTED,
            "monitor": SigContext.IN_MONITOR,
            "subdomain": SigContext.IN_SUBDOMAIN,
        }.get(phase)
        return tr.kernel_signal(tid, _int(ev.args[0]), context)
    if verb == "forge_signal":
        return tr.forged_signal(tid)
    if verb == "jump":
        return tr.probe_jump(tid, resolve_target(state, tid, kw["target"]))
    if verb == "tsx":
        return tr.probe_tsx(tid, resolve_target(state, tid, kw["target"]))
    if verb == "tsx_attack":
        return tr.tsx_attack(tid)
    if verb == "forkbomb":
        windows = None if kw.get("windows", "auto") == "auto" else _int(kw["windows"])
        guesses = None if kw.get("guesses", "auto") == "auto" else _int(kw["guesses"])
        return tr.fork_bomb(tid, windows, guesses)
    if verb == "poke":
        return tr.poke(tid, _int(kw["addr"]), _int(kw["value"]))
    if verb == "poke_bytes":
        data = WRPKRU_PATTERN if kw["data"] == "wrpkru" else bytes.fromhex(kw["data"])
        return tr.poke_bytes(tid, _int(kw["addr"]), data)
    if verb == "read_probe":
        return tr.read_probe(tid, _int(kw["addr"]))
    if verb == "jump_into":
        return tr.jump_into(tid, _int(kw["addr"]))
    if verb == "create_domain":
        code = _int(kw["code"])
        entries = _int(kw.get("entries", "1"))
        entrypoints = {i: code + 16 * (i + 1) for i in range(entries)}
        return tr.syscall(
            tid,
            "iv_create_domain",
            label=kw.get("label", "box"),
            ring=kw.get("ring", "safebox"),
            code_pages=(machine.page_of(code),),
            data_pages=(machine.page_of(_int(kw["data"])),) if "data" in kw else (),
            entrypoints=entrypoints,
        )
    if verb == "isolate_library":
        code = _int(kw["code"])
        exports = tuple(code + 16 * (i + 1) for i in range(_int(kw.get("exports", "1"))))
        return tr.syscall(
            tid,
            "iv_isolate_library",
            label=kw.get("label", "library"),
            code_pages=(machine.page_of(code),),
            data_pages=(machine.page_of(_int(kw["data"])),) if "data" in kw else (),
            exports=exports,
        )
    if verb == "xcall":
        return tr.syscall(
            tid,
            "xcall",
            target=domain_index(kw["target"]),
            entry=_int(kw.get("entry", "0")),
            nargs=_int(kw.get("nargs", "0")),
        )
    if verb == "xreturn":
        params = {"claim": domain_index(kw["claim"])} if "claim" in kw else {}
        return tr.syscall(tid, "xreturn", **params)
    if verb == "grant":
        return tr.syscall(
            tid, "iv_grant", page=machine.page_of(_int(kw["page"])), grantee=domain_index(kw["grantee"])
        )
    if verb == "revoke":
        return tr.syscall(tid, "iv_revoke", page=machine.page_of(_int(kw["page"])))
    if verb == "ioctl":
        params = {}
        if "kernel_addr" in kw:
            params["kernel_addr"] = _int(kw["kernel_addr"])
        return tr.syscall(tid, "ioctl", **params)
    # Fallback: a bare syscall name from the policy table (getppid, ptrace, ...).
    return tr.syscall(tid, verb)


# -- reports -----------------------------------------------------------------------


@dataclass(frozen=True)
class EventOutcome:
    index: int
    tid: int
    verb: str
    line: int
    expected: str
    actual: str
    reason: str | None
    pkru_transitions: int

    @property
    def matched(self) -> bool:
        return self.expected == self.actual


@dataclass(frozen=True)
class Report:
    scenario: str
    variant: str
    seed: int
    events: tuple[EventOutcome, ...]
    denials: int
    bypasses: int
    sp_violations: int
    breaches: int
    pkru_transitions: int
    schedules: int = 1

    @property
    def passed(self) -> bool:
        return self.breaches == 0 and all(ev.matched for ev in self.events)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "variant": self.variant,
            "seed": self.seed,
            "schedules": self.schedules,
            "pass": self.passed,
            "denials": self.denials,
            "bypasses": self.bypasses,
            "sp_violations": self.sp_violations,
            "breaches": self.breaches,
            "pkru_transitions": self.pkru_transitions,
            "events": [
                {
                    "index": ev.index,
                    "tid": ev.tid,
                    "verb": ev.verb,
                    "line": ev.line,
                    "expected": ev.expected,
                    "actual": ev.actual,
                    "reason": ev.reason,
                    "pkru_transitions": ev.pkru_transitions,
                }
                for ev in self.events
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def setup_state(scenario: Scenario, config: SimConfig, seed: int) -> MachineState:
    """Boot the machine, declare files, and spawn the scenario's threads."""
    state = new_initial(config, seed=seed)
    state = start_user(state)
    fs = state.fs
    paths = dict(fs.paths)
    sensitive = set(fs.sensitive_inodes)
    next_inode = fs.next_inode
    for path, is_sensitive in scenario.files:
        if path not in paths:
            paths[path] = next_inode
            next_inode += 1
        if is_sensitive:
            sensitive.add(paths[path])
    state = state.evolve(
        fs=replace(fs, paths=paths, sensitive_inodes=frozenset(sensitive), next_inode=next_inode)
    )
    for tid in scenario.spawns:
        state, new_tid = syscalls.spawn_thread(state, 0, via_queen=True)
        if new_tid != tid:
            raise ScenarioParseError(0, f"spawn order must be t1, t2, ... (got t{tid})")
    return state


def _status_token(result: StepResult) -> str:
    return result.status.value


def run_events(
    state: MachineState, events: tuple[Event, ...], env: RunEnv, outcomes: list[EventOutcome]
) -> tuple[MachineState, int]:
    """Execute events in order; returns the final state and breach count."""
    breaches = 0
    for ev in events:
        index = len(outcomes)
        try:
            t = event_transition(state, ev, env)
            state, result = tr.apply_transition(state, t)
        except SafetyBreachError as exc:
            breaches += 1
            outcomes.append(
                EventOutcome(index, ev.tid, ev.verb, ev.line, ev.expect, "breach", str(exc), 0)
            )
            break
        if ev.verb in ("create_domain", "isolate_library") and result.ok and "label" in ev.kwargs:
            env.domain_labels[ev.kwargs["label"]] = result.value
        outcomes.append(
            EventOutcome(
                index,
                ev.tid,
                ev.verb,
                ev.line,
                ev.expect,
                _status_token(result),
                result.reason,
                result.pkru_transitions,
            )
        )
    return state, breaches


def run_scenario(variant: str | None, scenario: Scenario, seed: int) -> Report:
    """Sequential run: init events then raced events, all in file order."""
    chosen = variant or scenario.variant or "secc_eph"
    config = default_config(chosen)
    state = setup_state(scenario, config, seed)
    env = RunEnv()
    outcomes: list[EventOutcome] = []
    state, breaches = run_events(state, scenario.init_events, env, outcomes)
    if not breaches:
        state, more = run_events(state, scenario.events, env, outcomes)
        breaches += more
    sp_count = 0 if breaches == 0 else len(safety_check(state).violations)
    return Report(
        scenario=scenario.name,
        variant=chosen,
        seed=seed,
        events=tuple(outcomes),
        denials=sum(1 for o in outcomes if o.actual == "deny"),
        bypasses=sum(1 for o in outcomes if o.actual == "bypass"),
        sp_violations=sp_count,
        breaches=breaches,
        pkru_transitions=sum(o.pkru_transitions for o in outcomes),
    )
