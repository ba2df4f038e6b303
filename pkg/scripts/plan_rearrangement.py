#!/usr/bin/env python3
"""
Pick-and-place planning from an initial layout to a goal layout.

Objects are handled containers first (a saucer before the mug that stands
on it). Before object i is placed, every object that has not been handled
yet and whose current box overlaps i's goal box is moved to a parking slot
on the table border. The simulator replays a plan as a sequence of
teleports and reports every overlap it sees.

Plan file format:

    {"provenance": {"initial": "z...", "goal": "z..."},
     "actions": [{"kind": "move-away", "object": 2, "from": [x, y], "to": [x, y]}, ...]}
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from layout_model import (
    CategoryVocab,
    DataError,
    Layout,
    ObjectCondition,
    PlanningError,
    boxes_overlap,
    overlapping_pairs,
)

logger = logging.getLogger(__name__)

PICK_PLACE = 'pick-place'
MOVE_AWAY = 'move-away'
ACTION_KINDS = (PICK_PLACE, MOVE_AWAY)

# 16 border slots: five along each long edge, three along each short edge
PARKING_SLOTS = (
    tuple((x, y) for y in (0.9, -0.9) for x in (-0.8, -0.4, 0.0, 0.4, 0.8))
    + tuple((x, y) for x in (-0.9, 0.9) for y in (-0.45, 0.0, 0.45))
)


@dataclass(frozen=True)
class PlannerConfig:
    margin_m: float = 0.005
    table_extent_m: tuple[float, float] = (1.2, 0.8)
    tolerance: float = 1e-9

    def __post_init__(self):
        if self.margin_m < 0:
            raise DataError("margin_m must be >= 0")
        if not all(e > 0 for e in self.table_extent_m):
            raise DataError(f"Table extent must be positive, got {self.table_extent_m}")

    @property
    def margin(self) -> float:
        """Margin in normalized units, taken along the table's shorter side."""
        return 2.0 * self.margin_m / min(self.table_extent_m)


@dataclass(frozen=True)
class PlanAction:
    kind: str
    object: int
    source: tuple[float, float]
    target: tuple[float, float]

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise DataError(f"Unknown action kind '{self.kind}'")
        if self.object < 0:
            raise DataError(f"Negative object index {self.object}")

    def to_dict(self) -> dict:
        return {'kind': self.kind, 'object': self.object,
                'from': list(self.source), 'to': list(self.target)}

    @classmethod
    def from_dict(cls, doc: dict) -> 'PlanAction':
        try:
            return cls(str(doc['kind']), int(doc['object']),
                       (float(doc['from'][0]), float(doc['from'][1])),
                       (float(doc['to'][0]), float(doc['to'][1])))
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise DataError(f"Malformed plan action: {e}") from e


@dataclass(frozen=True)
class RearrangePlan:
    actions: tuple[PlanAction, ...]
    initial_hash: str
    goal_hash: str

    def __len__(self) -> int:
        return len(self.actions)

    def to_dict(self) -> dict:
        return {
            'provenance': {'initial': self.initial_hash, 'goal': self.goal_hash},
            'actions': [a.to_dict() for a in self.actions],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> 'RearrangePlan':
        try:
            provenance = doc['provenance']
            actions = tuple(PlanAction.from_dict(a) for a in doc['actions'])
            return cls(actions, str(provenance['initial']), str(provenance['goal']))
        except (KeyError, TypeError) as e:
            raise DataError(f"Malformed plan: missing {e}") from e


def order_objects(conditions: Sequence[ObjectCondition], vocab: CategoryVocab) -> list[int]:
    """Containers first; the original index breaks ties."""
    for c in conditions:
        if c.label >= len(vocab):
            raise DataError(f"Label {c.label} outside vocab '{vocab.name}'")
    return sorted(range(len(conditions)), key=lambda i: not vocab.is_container(conditions[i].label))


def _at(a, b, tol: float) -> bool:
    return abs(a[0] - b[0]) <= tol and abs(a[1] - b[1]) <= tol


def _parking_slot(j: int, current, goal, sizes, margin: float) -> tuple[float, float]:
    """Nearest slot where object j overlaps no other object and no goal box."""
    x, y = current[j]
    ranked = sorted(range(len(PARKING_SLOTS)),
                    key=lambda s: ((PARKING_SLOTS[s][0] - x) ** 2 + (PARKING_SLOTS[s][1] - y) ** 2, s))
    for s in ranked:
        slot = PARKING_SLOTS[s]
        blocked = any(
            k != j and boxes_overlap(slot, sizes[j], current[k], sizes[k], margin)
            for k in range(len(current))
        ) or any(
            boxes_overlap(slot, sizes[j], goal[k], sizes[k], margin)
            for k in range(len(goal))
        )
        if not blocked:
            return slot
    raise PlanningError(f"No free parking slot for object {j}")


def _check_compatible(initial: Layout, goal: Layout, conditions: Sequence[ObjectCondition]) -> None:
    if not (len(initial) == len(goal) == len(conditions)):
        raise DataError(
            f"Layouts and conditions disagree: {len(initial)} initial, {len(goal)} goal, "
            f"{len(conditions)} conditions"
        )


def plan(initial: Layout, goal: Layout, conditions: Sequence[ObjectCondition], vocab: CategoryVocab,
         cfg: PlannerConfig = PlannerConfig()) -> RearrangePlan:
    """
    Plan pick-place and move-away actions taking initial to goal.

    Object i always goes to goal position i. Both layouts must be free of
    overlaps. Deterministic in its inputs.

    Args:
        initial: Current positions.
        goal: Target positions, one per object.
        conditions: Object sizes and labels.
        vocab: Vocabulary with the container flags.
        cfg: Parking margin, table extent and tolerance.

    Returns:
        The action sequence plus provenance hashes of both layouts.

    Raises:
        DataError: Layouts and conditions disagree in length, or a label is outside the vocab.
        PlanningError: Overlapping input layouts or no free parking slot.
    """
    _check_compatible(initial, goal, conditions)
    sizes = [c.size for c in conditions]
    for name, layout in (('initial', initial), ('goal', goal)):
        pairs = overlapping_pairs(layout.positions, sizes)
        if pairs:
            i, j = pairs[0]
            raise PlanningError(f"{name.capitalize()} layout has overlapping objects {i} and {j}")

    margin = cfg.margin
    current = list(initial.positions)
    targets = list(goal.positions)
    order = order_objects(conditions, vocab)
    actions = []
    for rank, i in enumerate(order):
        if _at(current[i], targets[i], cfg.tolerance):
            continue
        for j in order[rank + 1:]:
            if boxes_overlap(current[j], sizes[j], targets[i], sizes[i], margin):
                slot = _parking_slot(j, current, targets, sizes, margin)
                actions.append(PlanAction(MOVE_AWAY, j, current[j], slot))
                logger.debug("object %d blocks goal of %d; parking at %s", j, i, slot)
                current[j] = slot
        actions.append(PlanAction(PICK_PLACE, i, current[i], targets[i]))
        current[i] = targets[i]

    logger.info("Planned %d actions for %d objects", len(actions), len(conditions))
    return RearrangePlan(tuple(actions), initial.digest(), goal.digest())


@dataclass(frozen=True)
class Collision:
    action: int
    pair: tuple[int, int]

    def __str__(self) -> str:
        return f"action {self.action}: objects {self.pair[0]} and {self.pair[1]} overlap"


@dataclass(frozen=True)
class SimulationResult:
    final: Layout
    collisions: tuple[Collision, ...] = field(default=())

    @property
    def ok(self) -> bool:
        return not self.collisions

    def reached(self, goal: Layout, tol: float = 1e-9) -> bool:
        return len(goal) == len(self.final) and all(
            _at(a, b, tol) for a, b in zip(self.final.positions, goal.positions)
        )


def simulate(rearrange_plan: RearrangePlan, initial: Layout,
             conditions: Sequence[ObjectCondition]) -> SimulationResult:
    """Replay the plan as teleports, checking every pair after each action."""
    if len(initial) != len(conditions):
        raise DataError(f"{len(conditions)} conditions but {len(initial)} initial positions")
    sizes = [c.size for c in conditions]
    current = list(initial.positions)
    collisions = []
    for index, action in enumerate(rearrange_plan.actions):
        if action.object >= len(current):
            raise DataError(f"Action {index} references object {action.object} of {len(current)}")
        current[action.object] = action.target
        for pair in overlapping_pairs(current, sizes):
            collisions.append(Collision(index, pair))
    if collisions:
        logger.debug("Simulation found %d overlaps, first: %s", len(collisions), collisions[0])
    return SimulationResult(Layout(tuple(current)), tuple(collisions))


def write_plan(rearrange_plan: RearrangePlan, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(rearrange_plan.to_dict(), f, indent=2)


def read_plan(path: Path) -> RearrangePlan:
    path = Path(path)
    if not path.exists():
        raise DataError("File not found", path=path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"Malformed JSON: {e.msg}", path=path, line=e.lineno) from e
    try:
        return RearrangePlan.from_dict(doc)
    except DataError as e:
        raise DataError(e.message, path=path) from e
