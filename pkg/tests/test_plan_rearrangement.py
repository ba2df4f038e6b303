import logging

import numpy as np
import pytest

from layout_model import DataError, Layout, ObjectCondition, PlanningError, boxes_overlap, overlapping_pairs
from plan_rearrangement import (
    MOVE_AWAY,
    PICK_PLACE,
    PARKING_SLOTS,
    PlanAction,
    PlannerConfig,
    RearrangePlan,
    order_objects,
    plan,
    read_plan,
    simulate,
    write_plan,
)


def _cond(vocab, name, size=None):
    label = vocab.label(name)
    return ObjectCondition(size or vocab.entries[label].default_size, label)


def _random_layout(rng, sizes, attempts=1000):
    for _ in range(attempts):
        positions = [tuple(float(v) for v in rng.uniform(-0.5, 0.5, 2)) for _ in sizes]
        if not overlapping_pairs(positions, sizes):
            return Layout(tuple(positions))
    return None


def test_order_examples(dinner_vocab):
    mug, saucer = _cond(dinner_vocab, 'mug'), _cond(dinner_vocab, 'saucer')
    plate, cup = _cond(dinner_vocab, 'plate'), _cond(dinner_vocab, 'cup')
    fork, knife = _cond(dinner_vocab, 'fork'), _cond(dinner_vocab, 'knife')
    assert order_objects([mug, saucer], dinner_vocab) == [1, 0]
    assert order_objects([fork, knife, cup], dinner_vocab) == [0, 1, 2]
    assert order_objects([plate, cup, saucer], dinner_vocab) == [0, 2, 1]


def test_single_object_single_action(dinner_vocab):
    conditions = (_cond(dinner_vocab, 'cup'),)
    result = plan(Layout(((0.5, 0.5),)), Layout(((-0.2, 0.1),)), conditions, dinner_vocab)
    assert result.actions == (PlanAction(PICK_PLACE, 0, (0.5, 0.5), (-0.2, 0.1)),)


def test_blocker_is_moved_away_first(dinner_vocab):
    conditions = (_cond(dinner_vocab, 'plate', (0.3, 0.3)), _cond(dinner_vocab, 'cup'))
    initial = Layout(((0.5, 0.5), (0.0, 0.0)))
    goal = Layout(((0.0, 0.0), (-0.5, -0.5)))
    result = plan(initial, goal, conditions, dinner_vocab)
    assert [(a.kind, a.object) for a in result.actions] == [(MOVE_AWAY, 1), (PICK_PLACE, 0), (PICK_PLACE, 1)]
    assert result.actions[0].target == (0.0, 0.9)
    assert result.actions[2].source == (0.0, 0.9)


def test_everything_at_goal_gives_empty_plan(dinner_vocab):
    conditions = (_cond(dinner_vocab, 'plate'), _cond(dinner_vocab, 'fork'))
    layout = Layout(((0.0, 0.0), (0.6, 0.0)))
    assert len(plan(layout, layout, conditions, dinner_vocab)) == 0
    assert simulate(plan(layout, layout, conditions, dinner_vocab), layout, conditions).final == layout


def test_overlapping_initial_layout_rejected(dinner_vocab):
    conditions = (_cond(dinner_vocab, 'plate'), _cond(dinner_vocab, 'cup'))
    with pytest.raises(PlanningError, match='Initial'):
        plan(Layout(((0.0, 0.0), (0.05, 0.0))), Layout(((0.0, 0.0), (0.6, 0.0))), conditions, dinner_vocab)


def test_condition_mismatch(dinner_vocab):
    with pytest.raises(DataError):
        plan(Layout(((0.0, 0.0),)), Layout(((0.0, 0.0), (0.5, 0.0))), (_cond(dinner_vocab, 'cup'),), dinner_vocab)


def test_no_parking_slot_left(dinner_vocab):
    big = (1.0, 1.0)
    conditions = (_cond(dinner_vocab, 'plate', big), _cond(dinner_vocab, 'bowl', big))
    initial = Layout(((-0.5, 0.0), (0.5, 0.0)))
    goal = Layout(((0.5, 0.0), (-0.5, 0.0)))
    with pytest.raises(PlanningError, match='parking slot'):
        plan(initial, goal, conditions, dinner_vocab)


def test_closed_loop_on_random_instances(dinner_vocab):
    rng = np.random.default_rng(0)
    done = 0
    while done < 1000:
        n = int(rng.integers(2, 9))
        conditions = tuple(
            ObjectCondition((float(rng.uniform(0.02, 0.2)), float(rng.uniform(0.02, 0.2))),
                            int(rng.integers(len(dinner_vocab))))
            for _ in range(n)
        )
        sizes = [c.size for c in conditions]
        initial, goal = _random_layout(rng, sizes), _random_layout(rng, sizes)
        if initial is None or goal is None:
            continue
        result = plan(initial, goal, conditions, dinner_vocab)
        sim = simulate(result, initial, conditions)
        assert sim.ok, sim.collisions
        assert sim.reached(goal)
        assert result == plan(initial, goal, conditions, dinner_vocab)

        placed = [a for a in result.actions if a.kind == PICK_PLACE]
        flags = [dinner_vocab.is_container(conditions[a.object].label) for a in placed]
        assert flags == sorted(flags, reverse=True)
        margin = PlannerConfig().margin
        for a in result.actions:
            if a.kind == MOVE_AWAY:
                assert a.target in PARKING_SLOTS
                assert not any(boxes_overlap(a.target, sizes[a.object], g, sizes[k], margin)
                               for k, g in enumerate(goal.positions))
        done += 1


def test_simulate_collisions_log_nothing_above_debug(dinner_vocab, caplog):
    conditions = (_cond(dinner_vocab, 'cup'), _cond(dinner_vocab, 'mug'))
    initial = Layout(((-0.5, 0.0), (0.5, 0.0)))
    bad = RearrangePlan((PlanAction(PICK_PLACE, 0, (-0.5, 0.0), (0.5, 0.0)),), 'z1', 'z2')
    with caplog.at_level(logging.DEBUG, logger='plan_rearrangement'):
        assert not simulate(bad, initial, conditions).ok
    assert caplog.records
    assert all(r.levelno <= logging.DEBUG for r in caplog.records)


def test_simulate_reports_collisions(dinner_vocab):
    conditions = (_cond(dinner_vocab, 'cup'), _cond(dinner_vocab, 'mug'))
    initial = Layout(((-0.5, 0.0), (0.5, 0.0)))
    bad = RearrangePlan((PlanAction(PICK_PLACE, 0, (-0.5, 0.0), (0.2, 0.2)),
                         PlanAction(PICK_PLACE, 1, (0.5, 0.0), (0.2, 0.2))), 'z1', 'z2')
    result = simulate(bad, initial, conditions)
    assert not result.ok
    assert result.collisions[0].action == 1
    assert result.collisions[0].pair == (0, 1)
    assert 'objects 0 and 1' in str(result.collisions[0])


def test_simulate_empty_plan_is_identity(dinner_vocab):
    conditions = (_cond(dinner_vocab, 'cup'),)
    initial = Layout(((0.1, 0.1),))
    assert simulate(RearrangePlan((), 'z', 'z'), initial, conditions).final == initial
    with pytest.raises(DataError):
        simulate(RearrangePlan((PlanAction(PICK_PLACE, 3, (0, 0), (1, 1)),), 'z', 'z'), initial, conditions)


def test_margin_uses_shorter_table_side():
    assert PlannerConfig().margin == pytest.approx(2 * 0.005 / 0.8)
    with pytest.raises(DataError):
        PlannerConfig(margin_m=-1.0)


def test_plan_file_round_trip(tmp_path, dinner_vocab):
    conditions = (_cond(dinner_vocab, 'plate', (0.3, 0.3)), _cond(dinner_vocab, 'cup'))
    initial = Layout(((0.5, 0.5), (0.0, 0.0)))
    goal = Layout(((0.0, 0.0), (-0.5, -0.5)))
    result = plan(initial, goal, conditions, dinner_vocab)
    path = tmp_path / 'plan.json'
    write_plan(result, path)
    loaded = read_plan(path)
    assert loaded == result
    assert loaded.initial_hash == initial.digest()
    (tmp_path / 'broken.json').write_text('{"actions": []}')
    with pytest.raises(DataError):
        read_plan(tmp_path / 'broken.json')
