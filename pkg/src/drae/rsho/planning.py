"""Symbolic planning layer: UCB1 tree search over precondition->primitive
rules, plus the simulation-based plan validity check.

States are frozen sets of predicate ids; applying a rule removes its
delete set and adds its add set. Plans are sequences of rule indices so
validation is unambiguous even when primitives appear in several rules.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidParameter, RulesetFormatError

UCB_C = math.sqrt(2.0)
ROLLOUT_DEPTH = 20


@dataclass(frozen=True)
class Rule:
    pre: frozenset
    add: frozenset
    delete: frozenset
    primitive: int


@dataclass
class RuleSet:
    rules: list[Rule]
    skill_matrix: np.ndarray  # (num_primitives, num_skills), 0/1
    goal: frozenset
    predicates: list[str] = field(default_factory=list)
    primitives: list[str] = field(default_factory=list)

    def __post_init__(self):
        used = {r.primitive for r in self.rules}
        for p in used:
            if p >= self.skill_matrix.shape[0] or not self.skill_matrix[p].any():
                raise RulesetFormatError(
                    f"primitive {p} is not mapped to any skill column"
                )

    def primitive_name(self, rule_idx: int) -> str:
        p = self.rules[rule_idx].primitive
        return self.primitives[p] if p < len(self.primitives) else str(p)


def load_ruleset(path) -> RuleSet:
    """Read a rule-set JSON file: predicates, primitives, rules,
    skill_matrix, goal."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        rules = [
            Rule(
                pre=frozenset(r["pre"]),
                add=frozenset(r["add"]),
                delete=frozenset(r.get("del", [])),
                primitive=int(r["primitive"]),
            )
            for r in data["rules"]
        ]
        return RuleSet(
            rules=rules,
            skill_matrix=np.array(data["skill_matrix"], dtype=np.int64),
            goal=frozenset(data["goal"]),
            predicates=list(data.get("predicates", [])),
            primitives=list(data.get("primitives", [])),
        )
    except RulesetFormatError:
        raise
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise RulesetFormatError(f"malformed rule set: {exc}") from exc


def apply_rule(state: frozenset, rule: Rule) -> frozenset:
    return (state - rule.delete) | rule.add


def applicable(rules: list[Rule], state: frozenset) -> list[int]:
    return [i for i, r in enumerate(rules) if r.pre <= state]


def validate_plan(ruleset: RuleSet, initial_state, plan) -> bool:
    """True iff every step's precondition holds in sequence and the goal
    holds at the end."""
    state = frozenset(initial_state)
    for idx in plan:
        if not 0 <= idx < len(ruleset.rules):
            return False
        rule = ruleset.rules[idx]
        if not rule.pre <= state:
            return False
        state = apply_rule(state, rule)
    return ruleset.goal <= state


class _Node:
    __slots__ = ("state", "untried", "children", "visits", "value")

    def __init__(self, state: frozenset, rules: list[Rule]):
        self.state = state
        self.untried = applicable(rules, state)
        self.children = {}  # rule idx -> _Node
        self.visits = 0
        self.value = 0.0


def plan(
    ruleset: RuleSet,
    initial_state,
    budget: int,
    rng: np.random.Generator,
) -> list[int] | None:
    """UCB1 tree search for a rule sequence reaching the goal.

    Runs up to ``budget`` simulations (uniform rollouts to depth 20,
    reward 1 iff the goal is reached). Returns the shortest goal-reaching
    sequence seen, trimmed at the first goal state, or None on failure.
    Any returned plan passes validate_plan by construction.
    """
    if budget < 1:
        raise InvalidParameter("budget must be >= 1")
    start = frozenset(initial_state)
    if ruleset.goal <= start:
        return []
    root = _Node(start, ruleset.rules)
    best: list[int] | None = None

    for _ in range(budget):
        node = root
        path: list[int] = []
        # selection
        while not node.untried and node.children:
            log_n = math.log(node.visits)
            choice, child = max(
                node.children.items(),
                key=lambda kv: kv[1].value / kv[1].visits
                + UCB_C * math.sqrt(log_n / kv[1].visits),
            )
            path.append(choice)
            node = child
            if ruleset.goal <= node.state:
                break
        state = node.state
        reached = ruleset.goal <= state
        # expansion
        if not reached and node.untried:
            pick = int(rng.integers(len(node.untried)))
            idx = node.untried.pop(pick)
            state = apply_rule(state, ruleset.rules[idx])
            child = _Node(state, ruleset.rules)
            node.children[idx] = child
            path.append(idx)
            node = child
            reached = ruleset.goal <= state
        # rollout
        rollout_path: list[int] = []
        if not reached:
            for _ in range(ROLLOUT_DEPTH):
                options = applicable(ruleset.rules, state)
                if not options:
                    break
                idx = options[int(rng.integers(len(options)))]
                state = apply_rule(state, ruleset.rules[idx])
                rollout_path.append(idx)
                if ruleset.goal <= state:
                    reached = True
                    break
        reward = 1.0 if reached else 0.0
        # backpropagation along the tree path
        node = root
        node.visits += 1
        node.value += reward
        for idx in path:
            node = node.children[idx]
            node.visits += 1
            node.value += reward
        if reached:
            candidate = _trim(ruleset, start, path + rollout_path)
            if best is None or len(candidate) < len(best):
                best = candidate
    return best


def _trim(ruleset: RuleSet, start: frozenset, steps: list[int]) -> list[int]:
    """Cut a goal-reaching sequence at the first state satisfying the goal."""
    state = start
    for i, idx in enumerate(steps):
        if ruleset.goal <= state:
            return steps[:i]
        state = apply_rule(state, ruleset.rules[idx])
    return steps


def make_fetch_cup_ruleset() -> RuleSet:
    """Four-primitive cup-and-dispenser domain with chained preconditions.

    The unique shortest solution from an empty state is
    reach -> grasp -> move -> pour; used as the planning probe and as a
    CLI example fixture.
    """
    predicates = ["near_cup", "holding_cup", "at_dispenser", "cup_filled"]
    primitives = ["reach", "grasp", "move", "pour"]
    rules = [
        Rule(pre=frozenset(), add=frozenset({0}), delete=frozenset(), primitive=0),
        Rule(pre=frozenset({0}), add=frozenset({1}), delete=frozenset(), primitive=1),
        Rule(pre=frozenset({1}), add=frozenset({2}), delete=frozenset({0}),
             primitive=2),
        Rule(pre=frozenset({1, 2}), add=frozenset({3}), delete=frozenset(),
             primitive=3),
    ]
    return RuleSet(
        rules=rules,
        skill_matrix=np.eye(4, dtype=np.int64),
        goal=frozenset({3}),
        predicates=predicates,
        primitives=primitives,
    )


def simulate_trace(ruleset: RuleSet, initial_state, plan_steps) -> list[dict]:
    """Step-by-step state trace for a plan, for inspection output."""
    state = frozenset(initial_state)
    trace = [{"step": 0, "rule": None, "state": sorted(state)}]
    for i, idx in enumerate(plan_steps, start=1):
        state = apply_rule(state, ruleset.rules[idx])
        trace.append(
            {
                "step": i,
                "rule": int(idx),
                "primitive": ruleset.primitive_name(idx),
                "state": sorted(state),
            }
        )
    return trace
