import json
import math

import numpy as np
import pytest

from layout_model import (
    DATASET_FORMAT,
    ArrangementExample,
    Category,
    CategoryVocab,
    DataError,
    Layout,
    ObjectCondition,
    boxes_overlap,
    canonical_order,
    content_hash,
    denormalize,
    normalize,
    overlapping_pairs,
    parse_dataset_lines,
    read_dataset,
    read_scene,
    vocab_for_domain,
    write_dataset,
)


def test_normalize_examples():
    assert normalize((320, 240), (640, 480)) == (0.0, 0.0)
    assert normalize((0, 0), (640, 480)) == (-1.0, -1.0)
    assert normalize((320, 120), (640, 480)) == (0.0, -0.5)


def test_normalize_denormalize_inverse():
    rng = np.random.default_rng(0)
    frame = (1.2, 0.8)
    for point in rng.uniform(0, 1, size=(100, 2)) * frame:
        back = denormalize(normalize(point, frame), frame)
        assert back == pytest.approx(tuple(point), abs=1e-12)


def test_normalize_rejects_bad_input():
    with pytest.raises(DataError):
        normalize((math.nan, 0.0), (1.0, 1.0))
    with pytest.raises(DataError):
        normalize((0.0, 0.0), (0.0, 1.0))


def test_canonical_order_sorts_by_label():
    conditions = (ObjectCondition((0.1, 0.1), 3), ObjectCondition((0.1, 0.1), 1))
    ordered, layout = canonical_order(conditions, Layout(((0.5, 0.0), (-0.5, 0.0))))
    assert [c.label for c in ordered] == [1, 3]
    assert layout.positions == ((-0.5, 0.0), (0.5, 0.0))


def test_canonical_order_larger_first_and_idempotent():
    small = ObjectCondition((0.2, 0.2), 0)
    large = ObjectCondition((0.3, 0.3), 0)
    ordered, layout = canonical_order((small, large), Layout(((0.0, 0.0), (0.5, 0.5))))
    assert ordered == (large, small)
    again = canonical_order(ordered, layout)
    assert again == (ordered, layout)


def test_canonical_order_length_mismatch():
    with pytest.raises(DataError):
        canonical_order((ObjectCondition((0.1, 0.1), 0),), Layout(()))


def test_vocab_invariants():
    plate = Category('plate', True, (0.3, 0.3))
    fork = Category('fork', False, (0.05, 0.3))
    with pytest.raises(DataError, match='Duplicate'):
        CategoryVocab('x', (plate, plate, fork))
    with pytest.raises(DataError, match='no container'):
        CategoryVocab('x', (fork,))
    vocab = CategoryVocab('x', (plate, fork))
    assert vocab.label('fork') == 1
    assert vocab.is_container(0)


def test_domain_vocab_shared_by_handedness():
    assert vocab_for_domain('dinner-left').digest() == vocab_for_domain('dinner-vanilla').digest()
    with pytest.raises(DataError):
        vocab_for_domain('kitchen')


def test_condition_bounds():
    with pytest.raises(DataError):
        ObjectCondition((0.0, 0.1), 0)
    with pytest.raises(DataError):
        ObjectCondition((2.5, 0.1), 0)


def test_boxes_touching_do_not_overlap():
    assert not boxes_overlap((0.0, 0.0), (0.2, 0.2), (0.2, 0.0), (0.2, 0.2))
    assert boxes_overlap((0.0, 0.0), (0.2, 0.2), (0.19, 0.0), (0.2, 0.2))
    assert overlapping_pairs([(0, 0), (1, 1), (0.05, 0)], [(0.2, 0.2)] * 3) == [(0, 2)]


def test_content_hash_is_stable_multibase():
    a = content_hash({'b': 1, 'a': [1, 2]})
    assert a.startswith('z')
    assert a == content_hash({'a': [1, 2], 'b': 1})


def test_dataset_file_round_trip(tmp_path, dinner_left):
    path = tmp_path / 'data.jsonl'
    write_dataset(dinner_left, path)
    loaded = read_dataset(path)
    assert loaded == dinner_left


def test_parse_reports_every_bad_line(dinner_vocab):
    good = '{"domain": "dinner-left", "objects": [{"label": 0, "size": [0.3, 0.3], "pos": [0, 0]}]}'
    bad_label = '{"domain": "dinner-left", "objects": [{"label": 8, "size": [0.3, 0.3], "pos": [0, 0]}]}'
    with pytest.raises(DataError) as info:
        parse_dataset_lines([good, '{not json', good, bad_label], dinner_vocab, source='d.jsonl')
    assert info.value.line == 2
    assert '2 invalid line(s)' in info.value.message
    assert 'line 4' in info.value.message


def test_parse_rejects_non_finite(dinner_vocab):
    line = '{"domain": "dinner-left", "objects": [{"label": 0, "size": [0.3, 0.3], "pos": [NaN, 0]}]}'
    with pytest.raises(DataError):
        parse_dataset_lines([line], dinner_vocab)


def test_header_vocab_mismatch(tmp_path, dinner_left, desk_vocab):
    path = tmp_path / 'data.jsonl'
    write_dataset(dinner_left, path)
    with pytest.raises(DataError, match='does not match'):
        read_dataset(path, desk_vocab)


def test_example_requires_objects():
    with pytest.raises(DataError):
        ArrangementExample((), Layout(()), 'dinner-left')


def test_read_scene_files():
    from layout_model import REPO_ROOT
    scene = read_scene(REPO_ROOT / 'scenes' / 'dinner_left_messy.json')
    assert scene.domain == 'dinner-left'
    assert len(scene.conditions) == 4
    assert not overlapping_pairs(scene.goal.positions, [c.size for c in scene.conditions])


@pytest.mark.parametrize('label', ['"fork"', '2.7', 'true', 'null', '[1]'])
def test_non_integer_label_is_data_error(label):
    doc = json.loads(f'{{"domain": "dinner-left", "objects": [{{"label": {label}, "size": [0.3, 0.3], "pos": [0, 0]}}]}}')
    with pytest.raises(DataError, match='label'):
        ArrangementExample.from_dict(doc)


def test_integral_float_label_is_accepted():
    doc = {'domain': 'dinner-left', 'objects': [{'label': 3.0, 'size': [0.3, 0.3], 'pos': [0, 0]}]}
    assert ArrangementExample.from_dict(doc).conditions[0].label == 3


def test_bad_size_value_is_data_error(dinner_vocab):
    line = '{"domain": "dinner-left", "objects": [{"label": 0, "size": ["wide", 0.3], "pos": [0, 0]}]}'
    with pytest.raises(DataError, match='1 invalid line'):
        parse_dataset_lines([line], dinner_vocab)


@pytest.mark.parametrize('normalization', [
    '{"table_extent_m": ["x", 0.8]}',
    '{"table_extent_m": [1.2]}',
    '[1.2, 0.8]',
    '{"table_extent_m": [Infinity, 0.8]}',
])
def test_malformed_header_is_reported_per_line(dinner_vocab, normalization):
    header = json.loads(f'{{"format": "{DATASET_FORMAT}", "normalization": {normalization}}}')
    header['vocab'] = dinner_vocab.to_dict()
    good = '{"domain": "dinner-left", "objects": [{"label": 0, "size": [0.3, 0.3], "pos": [0, 0]}]}'
    with pytest.raises(DataError) as info:
        parse_dataset_lines([json.dumps(header), good], dinner_vocab, source='d.jsonl')
    assert info.value.line == 1
    assert 'bad header' in info.value.message


def test_header_with_broken_vocab_is_data_error(dinner_vocab):
    header = json.dumps({'format': DATASET_FORMAT, 'vocab': {'name': 'dinner', 'categories': 'plate'}})
    with pytest.raises(DataError, match='bad header'):
        parse_dataset_lines([header], dinner_vocab)
