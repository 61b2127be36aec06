"""Budget-constrained assignment of tasks to models.

A grouping picks a set of models so that every task is served by exactly
one of them while the summed model cost stays within a budget. The
candidate family is deliberately small: single-task models and two-task
models, where a two-task model may serve one or both of its training
tasks (a task trained but not served acts purely as a training aid).

Aggregate performance sums the served tasks' MTL gains; a task served by
its own single-task model contributes the STL baseline (0 by default,
since gains are measured relative to STL). The optimizer enumerates the
candidate space exhaustively, so it is exact but only meant for small
task counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .matrices import TaskMatrix

__all__ = [
    "MAX_EXHAUSTIVE_TASKS",
    "BUDGET_SLACK",
    "Violation",
    "ModelCandidate",
    "Grouping",
    "InvalidGroupingError",
    "InfeasibleGroupingError",
    "is_valid_grouping",
    "aggregate_performance",
    "optimize_grouping",
]

MAX_EXHAUSTIVE_TASKS = 10

# Costs within this absolute slack of the budget still count as affordable,
# so budgets expressed as sums of float costs are not rejected for rounding.
BUDGET_SLACK = 1e-9


class InvalidGroupingError(ValueError):
    """A grouping violates the serving/budget constraints."""


class InfeasibleGroupingError(ValueError):
    """No valid grouping fits within the budget."""


@dataclass(frozen=True)
class Violation:
    """One constraint breach; subject names the offending task or model."""

    kind: str
    subject: str
    detail: str

    def __str__(self) -> str:
        return self.detail


@dataclass(frozen=True)
class ModelCandidate:
    """One model: the tasks it trains on, the subset it serves, its cost."""

    training: tuple[str, ...]
    serving: tuple[str, ...]
    cost: float

    def __post_init__(self):
        object.__setattr__(self, "training", tuple(sorted(set(self.training))))
        object.__setattr__(self, "serving", tuple(sorted(set(self.serving))))
        if not self.training:
            raise ValueError("a model must train on at least one task")
        if not self.serving:
            raise ValueError("a model must serve at least one task")
        extra = set(self.serving) - set(self.training)
        if extra:
            raise ValueError(f"serving tasks {sorted(extra)} are not trained by "
                             f"this model (trains {list(self.training)})")
        object.__setattr__(self, "cost", float(self.cost))
        if not self.cost > 0:
            raise ValueError(f"model cost must be positive, got {self.cost}")

    @property
    def encoding(self) -> tuple[tuple[str, ...], tuple[str, ...]]:
        """Canonical sort key: (training tasks, serving tasks)."""
        return (self.training, self.serving)

    def describe(self) -> str:
        return f"[{'+'.join(self.training)} -> {'+'.join(self.serving)}]"

    def to_json_dict(self) -> dict:
        return {"training_tasks": list(self.training),
                "serving_tasks": list(self.serving), "cost": self.cost}

    @classmethod
    def from_json_dict(cls, payload: Mapping) -> "ModelCandidate":
        return cls(tuple(payload["training_tasks"]),
                   tuple(payload["serving_tasks"]), payload["cost"])


@dataclass(frozen=True)
class Grouping:
    """A chosen set of candidates plus the budget they must respect."""

    candidates: tuple[ModelCandidate, ...]
    budget: float

    def __post_init__(self):
        ordered = tuple(sorted(self.candidates, key=lambda c: c.encoding))
        object.__setattr__(self, "candidates", ordered)
        object.__setattr__(self, "budget", float(self.budget))

    @property
    def total_cost(self) -> float:
        return sum(c.cost for c in self.candidates)

    def encoding(self) -> tuple:
        return tuple(c.encoding for c in self.candidates)

    def to_json_dict(self) -> dict:
        return {"models": [c.to_json_dict() for c in self.candidates],
                "budget": self.budget, "total_cost": self.total_cost}

    @classmethod
    def from_json_dict(cls, payload: Mapping) -> "Grouping":
        return cls(tuple(ModelCandidate.from_json_dict(m) for m in payload["models"]),
                   payload["budget"])


def is_valid_grouping(tasks: Iterable[str], grouping: Grouping) -> list[Violation]:
    """Check all grouping constraints; an empty list means valid.

    Violations are returned as data rather than raised: exactly-once
    serving per task, serving within training, known tasks only, and the
    budget bound.
    """
    names = tuple(tasks)
    known = set(names)
    violations: list[Violation] = []
    served_by: dict[str, list[str]] = {}
    for cand in grouping.candidates:
        label = cand.describe()
        for t in cand.serving:
            served_by.setdefault(t, []).append(label)
        for t in cand.training:
            if t not in known:
                violations.append(Violation(
                    "unknown_task", t, f"model {label} involves unknown task {t!r}"))
        stray = set(cand.serving) - set(cand.training)
        for t in sorted(stray):  # unreachable via the constructor, kept for parity
            violations.append(Violation(
                "serving_not_trained", t,
                f"model {label} serves {t!r} without training on it"))
    for t in names:
        servers = served_by.get(t, [])
        if not servers:
            violations.append(Violation(
                "unserved", t, f"task {t!r} is not served by any model"))
        elif len(servers) > 1:
            violations.append(Violation(
                "served_twice", t,
                f"task {t!r} is served {len(servers)} times: {', '.join(servers)}"))
    if grouping.total_cost > grouping.budget + BUDGET_SLACK:
        violations.append(Violation(
            "over_budget", "",
            f"total cost {grouping.total_cost} exceeds budget {grouping.budget}"))
    return violations


def aggregate_performance(grouping: Grouping, gain: TaskMatrix,
                          stl_baseline: float = 0.0) -> float:
    """Sum each task's gain under its serving model.

    Single-task models contribute the STL baseline per served task;
    two-task models contribute the served task's gain with its training
    partner. Gains are read in whatever unit the matrix uses.

    Raises:
        InvalidGroupingError: the grouping fails is_valid_grouping.
        ValueError: a candidate trains on three or more tasks (outside the
            supported family).
    """
    violations = is_valid_grouping(gain.tasks, grouping)
    if violations:
        raise InvalidGroupingError("; ".join(str(v) for v in violations))
    total = 0.0
    for cand in grouping.candidates:
        if len(cand.training) == 1:
            total += stl_baseline * len(cand.serving)
        elif len(cand.training) == 2:
            a, b = cand.training
            for t in cand.serving:
                partner = b if t == a else a
                total += gain.get(partner, t)
        else:
            raise ValueError(f"model {cand.describe()} trains on "
                             f"{len(cand.training)} tasks; only 1 or 2 supported")
    return total


def optimize_grouping(tasks: Sequence[str], gain: TaskMatrix, budget: float,
                      stl_cost: float = 1.0,
                      mtl_cost: float | None = None) -> tuple[Grouping, float]:
    """Exhaustively find the gain-maximizing valid grouping.

    The candidate family is one single-task model per task (cost
    ``stl_cost``) and one two-task model per unordered pair (cost
    ``mtl_cost``, default 2x) which may serve either or both tasks. Equal
    totals are broken toward the lexicographically smallest grouping
    encoding, so the result is deterministic.

    Raises:
        InfeasibleGroupingError: nothing fits within the budget.
        ValueError: more than 10 tasks (enumeration bound), task set not
            matching the gain matrix, or non-positive costs.
    """
    names = tuple(tasks)
    if not 2 <= len(names) <= MAX_EXHAUSTIVE_TASKS:
        raise ValueError(f"exhaustive search supports 2..{MAX_EXHAUSTIVE_TASKS} "
                         f"tasks, got {len(names)}")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate task names in {names}")
    if set(names) != set(gain.tasks):
        raise ValueError(f"tasks {sorted(names)} do not match the gain matrix's "
                         f"{sorted(gain.tasks)}")
    if mtl_cost is None:
        mtl_cost = 2.0 * stl_cost
    if stl_cost <= 0 or mtl_cost <= 0:
        raise ValueError(f"costs must be positive, got stl={stl_cost}, mtl={mtl_cost}")

    # Cheapest possible way to finish serving one task, for pruning.
    per_task_floor = min(stl_cost, mtl_cost / 2.0)
    best: tuple[float, tuple, tuple[ModelCandidate, ...]] | None = None

    def consider(chosen: tuple[ModelCandidate, ...], total: float) -> None:
        nonlocal best
        ordered = tuple(sorted(chosen, key=lambda c: c.encoding))
        key = tuple(c.encoding for c in ordered)
        if best is None or total > best[0] or (total == best[0] and key < best[1]):
            best = (total, key, ordered)

    def search(remaining: tuple[str, ...], used_pairs: frozenset,
               chosen: tuple[ModelCandidate, ...], spent: float, total: float) -> None:
        if not remaining:
            consider(chosen, total)
            return
        if spent + per_task_floor * len(remaining) > budget + BUDGET_SLACK:
            return
        pivot = remaining[0]
        rest = remaining[1:]
        if spent + stl_cost <= budget + BUDGET_SLACK:
            stl = ModelCandidate((pivot,), (pivot,), stl_cost)
            search(rest, used_pairs, chosen + (stl,), spent + stl_cost, total)
        if spent + mtl_cost > budget + BUDGET_SLACK:
            return
        for partner in names:
            if partner == pivot:
                continue
            pair = frozenset((pivot, partner))
            if pair in used_pairs:
                continue
            pivot_gain = gain.get(partner, pivot)
            solo = ModelCandidate((pivot, partner), (pivot,), mtl_cost)
            search(rest, used_pairs | {pair}, chosen + (solo,),
                   spent + mtl_cost, total + pivot_gain)
            if partner in rest:
                both = ModelCandidate((pivot, partner), (pivot, partner), mtl_cost)
                left = tuple(t for t in rest if t != partner)
                search(left, used_pairs | {pair}, chosen + (both,),
                       spent + mtl_cost, total + pivot_gain + gain.get(pivot, partner))

    search(names, frozenset(), (), 0.0, 0.0)
    if best is None:
        raise InfeasibleGroupingError(
            f"no valid grouping of {len(names)} tasks fits budget {budget} "
            f"(stl_cost={stl_cost}, mtl_cost={mtl_cost})")
    total, _, candidates = best
    return Grouping(candidates, budget), total
