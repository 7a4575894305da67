"""Simulator configuration: gate variants, the syscall policy table, and shared constants."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

PAGE_SIZE = 4096

# Byte patterns the code scanner looks for.
WRPKRU_PATTERN = b"\x0f\x01\xef"
SYSCALL_PATTERN = b"\x0f\x05"

# A sysret gadget is a 2-byte syscall opcode followed by a 1-byte return.
GADGET_LEN = 3

# Protection keys usable for untrusted domains (indices 0..13).
MAX_UNTRUSTED_DOMAINS = 14

DEFAULT_TRAMPOLINE_PAGES = 16

# Paths whose inodes are sensitive out of the box; extendable per scenario.
DEFAULT_SENSITIVE_PATHS = ("/proc/self/mem", "/proc/1/mem")

# Signal numbers the monitor keeps for itself (thread-library channel).
DEFAULT_RESERVED_SIGNALS = frozenset({32, 33})

UNCATCHABLE_SIGNALS = frozenset({9, 19})  # SIGKILL, SIGSTOP
IGNORED_BY_DEFAULT = frozenset({17, 23, 28})  # SIGCHLD, SIGURG, SIGWINCH


class FilterKind(Enum):
    SECCOMP = "secc"
    DISPATCH = "disp"


class GateVariant(Enum):
    RANDOM = "rand"
    EPHEMERAL = "eph"
    CET = "cet"


@dataclass(frozen=True)
class GateMechanism:
    """One of the five supported syscall-gate configurations."""

    filter: FilterKind
    variant: GateVariant
    pages: int = DEFAULT_TRAMPOLINE_PAGES
    rerand_freq: int = 0  # syscalls per re-randomization; Random only

    @property
    def name(self) -> str:
        base = f"{self.filter.value}_{self.variant.value}"
        if self.variant is GateVariant.RANDOM:
            return f"{base}:{self.rerand_freq}"
        return base


VARIANT_NAMES = ("secc_rand:<freq>", "secc_eph", "disp_eph", "secc_cet", "disp_cet")


def parse_variant(text: str) -> GateMechanism:
    """Parse a variant selection string such as ``secc_rand:32`` or ``disp_eph``."""
    name, _, freq_part = text.strip().partition(":")
    try:
        filt_part, var_part = name.split("_", 1)
        filt = FilterKind(filt_part)
        variant = GateVariant(var_part)
    except ValueError:
        raise ValueError(f"unknown gate variant {text!r}; expected one of {VARIANT_NAMES}") from None
    if variant is GateVariant.RANDOM:
        if filt is not FilterKind.SECCOMP:
            raise ValueError("the randomized gate is only supported with the seccomp filter")
        if not freq_part:
            raise ValueError("secc_rand requires a re-randomization frequency, e.g. secc_rand:32")
        freq = int(freq_part)
        if freq < 1:
            raise ValueError("re-randomization frequency must be >= 1")
        return GateMechanism(filt, variant, rerand_freq=freq)
    if freq_part:
        raise ValueError(f"{name} takes no :<freq> suffix")
    return GateMechanism(filt, variant)


class SyscallKind(Enum):
    PASSTHROUGH = "passthrough"
    VIRTUALIZED = "virt"
    DENIED = "deny"


@dataclass(frozen=True)
class SyscallClass:
    kind: SyscallKind
    handler: str | None = None  # file | memory | process | signal


class UnknownSyscall(KeyError):
    """Raised for names outside the configured syscall table (deny by default)."""


def parse_syscall_table(text: str) -> dict[str, SyscallClass]:
    """Parse the one-line-per-syscall policy table.

    Format: ``<name> <passthrough|virt:<handler>|deny>``; ``#`` starts a comment.
    """
    table: dict[str, SyscallClass] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"syscall table line {lineno}: expected '<name> <class>', got {raw!r}")
        name, cls = parts
        if cls == "passthrough":
            table[name] = SyscallClass(SyscallKind.PASSTHROUGH)
        elif cls == "deny":
            table[name] = SyscallClass(SyscallKind.DENIED)
        elif cls.startswith("virt:"):
            handler = cls.split(":", 1)[1]
            if handler not in ("file", "memory", "process", "signal"):
                raise ValueError(f"syscall table line {lineno}: unknown handler {handler!r}")
            table[name] = SyscallClass(SyscallKind.VIRTUALIZED, handler)
        else:
            raise ValueError(f"syscall table line {lineno}: unknown class {cls!r}")
    return table


_DEFAULT_TABLE: dict[str, SyscallClass] | None = None


def default_syscall_table() -> dict[str, SyscallClass]:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        text = resources.files("endosim").joinpath("syscall_table.conf").read_text()
        _DEFAULT_TABLE = parse_syscall_table(text)
    return _DEFAULT_TABLE


@dataclass(frozen=True)
class SimConfig:
    """Immutable policy configuration shared by a machine state and its forks."""

    gate: GateMechanism
    syscall_table: dict[str, SyscallClass] = field(default_factory=default_syscall_table)
    sensitive_paths: tuple[str, ...] = DEFAULT_SENSITIVE_PATHS
    reserved_signals: frozenset[int] = DEFAULT_RESERVED_SIGNALS
    tsx_enabled: bool = True
    scan_syscall_opcode: bool = False  # scan for raw syscall opcodes too (filterless mode)
    xcall_arg_slots: int = 6

    def classify_name(self, name: str) -> SyscallClass:
        try:
            return self.syscall_table[name]
        except KeyError:
            raise UnknownSyscall(name) from None


def default_config(variant: str = "secc_eph") -> SimConfig:
    return SimConfig(gate=parse_variant(variant))
