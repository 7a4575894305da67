"""Exception types shared across the simulator."""
from __future__ import annotations


class PolicyDenied(Exception):
    """An operation was rejected by the monitor. Expected, recoverable."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}{': ' + detail if detail else ''}")


class KernelFault(Exception):
    """A simulated hardware/kernel fault (e.g. a protection-key rejection)."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}{': ' + detail if detail else ''}")


class SafetyBreachError(Exception):
    """A committed state failed a safety check. Indicates a simulator bug."""


class ScenarioParseError(Exception):
    def __init__(self, line: int, message: str):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}")


class BudgetExceeded(Exception):
    """Interleaving exploration exceeded the configured schedule cap."""
