"""Three-layer control stack: PID execution, symbolic tree-search
planning, and convolution-memory candidate ranking."""

from .control import (
    ArmState,
    IntegratorPlant,
    PidController,
    adapt_gains,
    arm_step,
    forward_kinematics,
    jacobian,
    pid_action,
    wrap_angle,
)
from .memory import HyperMemory, init_memory, memory_update, rank_candidates
from .planning import (
    Rule,
    RuleSet,
    apply_rule,
    applicable,
    load_ruleset,
    plan,
    simulate_trace,
    validate_plan,
)

__all__ = [
    "ArmState",
    "HyperMemory",
    "IntegratorPlant",
    "PidController",
    "Rule",
    "RuleSet",
    "adapt_gains",
    "applicable",
    "apply_rule",
    "arm_step",
    "forward_kinematics",
    "init_memory",
    "jacobian",
    "load_ruleset",
    "memory_update",
    "pid_action",
    "plan",
    "rank_candidates",
    "simulate_trace",
    "validate_plan",
    "wrap_angle",
]
