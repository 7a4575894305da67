"""endosim: a deterministic simulator of a nested in-process isolation monitor.

The core package models a virtual process machine (pages, files, threads,
domains), a syscall monitor with three secure call-gate mechanisms, signal
virtualization, and multi-domain compartments, and re-checks four safety
predicates after every committed transition. The harness layer runs scenario
scripts, explores thread interleavings, reproduces a 15-attack defense matrix,
and measures the randomized gate's leak probability.
"""
from .config import GateMechanism, SimConfig, default_config, parse_variant
from .errors import (
    BudgetExceeded,
    KernelFault,
    PolicyDenied,
    SafetyBreachError,
    ScenarioParseError,
)
from .machine import (
    APP_DOMAIN,
    DomainId,
    MachineState,
    PageAttr,
    PermSet,
    Ring,
    SafetyProperty,
    TRUSTED,
    new_initial,
    safety_check,
    start_user,
)
from .transitions import (
    Status,
    StepResult,
    Transition,
    apply_transition,
    run_trace,
    try_transition,
)

__version__ = "0.1.0"

__all__ = [
    "APP_DOMAIN",
    "BudgetExceeded",
    "DomainId",
    "GateMechanism",
    "KernelFault",
    "MachineState",
    "PageAttr",
    "PermSet",
    "PolicyDenied",
    "Ring",
    "SafetyBreachError",
    "SafetyProperty",
    "ScenarioParseError",
    "SimConfig",
    "Status",
    "StepResult",
    "TRUSTED",
    "Transition",
    "apply_transition",
    "default_config",
    "new_initial",
    "parse_variant",
    "run_trace",
    "safety_check",
    "start_user",
    "try_transition",
    "__version__",
]
