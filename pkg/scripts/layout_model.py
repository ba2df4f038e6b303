#!/usr/bin/env python3
"""
Shared domain types for tabletop layout priors.

Coordinates live in a normalized table frame: the table spans [-1, 1] on both
axes. Every scene is a list of objects, each described by an ObjectCondition
(axis-aligned bounding-box size plus an integer category label) and a 2D
position.

Dataset file format (JSON Lines):

    {"format": "layoutprior-dataset", "version": 1,
     "vocab": {...}, "normalization": {"table_extent_m": [1.2, 0.8]}}
    {"domain": "dinner-left", "objects": [{"label": 0, "size": [w, h], "pos": [x, y]}, ...]}
    ...

The first (header) line is optional for externally produced files; when it is
present its vocab must match the vocab the reader was given.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import base58
import numpy as np

# Directory paths (relative to repository root)
SCRIPT_DIR = Path(__file__).parent
REPO_ROOT = SCRIPT_DIR.parent
VOCABS_DIR = REPO_ROOT / 'vocabs'

DATASET_FORMAT = 'layoutprior-dataset'
DATASET_VERSION = 1

# domain tag -> (scenario vocab name, left-handed)
DOMAINS = {
    'dinner-vanilla': ('dinner', False),
    'dinner-left': ('dinner', True),
    'desk-vanilla': ('desk', False),
    'desk-left': ('desk', True),
}

MAX_EXTENT = 2.0


class LayoutPriorError(Exception):
    """Base class for every error raised by the layout prior tools."""


class DataError(LayoutPriorError, ValueError):
    """Invalid input data, optionally tied to a file and line."""

    def __init__(self, message: str, path: Path | str | None = None, line: int | None = None):
        super().__init__(message)
        self.message = message
        self.path = str(path) if path is not None else None
        self.line = line

    def __str__(self) -> str:
        location = ''
        if self.path is not None:
            location = f"{self.path}:{self.line}: " if self.line is not None else f"{self.path}: "
        elif self.line is not None:
            location = f"line {self.line}: "
        return location + self.message


class NumericalError(LayoutPriorError, ArithmeticError):
    """Non-finite values or a failed integration."""

    def __init__(self, message: str, detail: str | None = None):
        super().__init__(message)
        self.detail = detail


class PlanningError(LayoutPriorError):
    """The rearrangement planner could not produce a feasible plan."""


def canonical_json(obj) -> bytes:
    """
    Serialize to canonical JSON: sorted keys, no whitespace, UTF-8.

    Used wherever a stable digest of a document is needed.
    """
    return json.dumps(
        obj,
        separators=(',', ':'),
        sort_keys=True,
        ensure_ascii=False
    ).encode('utf-8')


def encode_multibase(data: bytes) -> str:
    """Encode bytes as multibase base58btc (prefix 'z')."""
    return 'z' + base58.b58encode(data).decode('ascii')


def content_hash(obj) -> str:
    """Multibase-encoded sha256 of the canonical JSON form of obj."""
    return encode_multibase(hashlib.sha256(canonical_json(obj)).digest())


@dataclass(frozen=True)
class Category:
    name: str
    container: bool
    default_size: tuple[float, float]


@dataclass(frozen=True)
class CategoryVocab:
    """Ordered category list; the label of a category is its index."""

    name: str
    entries: tuple[Category, ...]
    table_extent_m: tuple[float, float] = (1.2, 0.8)

    def __post_init__(self):
        names = [c.name for c in self.entries]
        if len(set(names)) != len(names):
            raise DataError(f"Duplicate category names in vocab '{self.name}'")
        if not any(c.container for c in self.entries):
            raise DataError(f"Vocab '{self.name}' has no container category")
        if all(c.container for c in self.entries):
            raise DataError(f"Vocab '{self.name}' has no non-container category")
        for c in self.entries:
            if not all(0.0 < s <= MAX_EXTENT for s in c.default_size):
                raise DataError(f"Category '{c.name}' has invalid default size {c.default_size}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.entries]

    def label(self, name: str) -> int:
        for index, category in enumerate(self.entries):
            if category.name == name:
                return index
        raise DataError(f"Unknown category '{name}' for vocab '{self.name}'")

    def has(self, name: str) -> bool:
        return name in self.names

    def is_container(self, label: int) -> bool:
        return self.entries[label].container

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'table_extent_m': list(self.table_extent_m),
            'categories': [
                {'name': c.name, 'container': c.container, 'size': list(c.default_size)}
                for c in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> 'CategoryVocab':
        try:
            entries = tuple(
                Category(str(c['name']), bool(c['container']), (float(c['size'][0]), float(c['size'][1])))
                for c in doc['categories']
            )
            extent = doc.get('table_extent_m', [1.2, 0.8])
            return cls(str(doc['name']), entries, (float(extent[0]), float(extent[1])))
        except DataError:
            raise
        except (KeyError, TypeError, IndexError, ValueError) as e:
            raise DataError(f"Malformed vocab document: {e}") from e

    def digest(self) -> str:
        return content_hash(self.to_dict())


def load_vocab(name_or_path: str | Path) -> CategoryVocab:
    """
    Load a vocabulary by scenario name ('dinner', 'desk') or by file path.
    """
    path = Path(name_or_path)
    if not path.suffix:
        path = VOCABS_DIR / f"{name_or_path}.json"
    if not path.exists():
        raise DataError(f"Vocab file not found", path=path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"Malformed JSON: {e.msg}", path=path, line=e.lineno) from e
    return CategoryVocab.from_dict(doc)


def vocab_for_domain(domain: str) -> CategoryVocab:
    """Load the scenario vocab behind a domain tag."""
    if domain not in DOMAINS:
        raise DataError(f"Unknown domain '{domain}' (expected one of {', '.join(DOMAINS)})")
    return load_vocab(DOMAINS[domain][0])


def _check_finite(values: Iterable[float], what: str) -> None:
    if not all(math.isfinite(v) for v in values):
        raise DataError(f"Non-finite {what}")


@dataclass(frozen=True)
class ObjectCondition:
    size: tuple[float, float]
    label: int

    def __post_init__(self):
        w, h = self.size
        _check_finite((w, h), 'object size')
        if not (0.0 < w <= MAX_EXTENT and 0.0 < h <= MAX_EXTENT):
            raise DataError(f"Object size {self.size} outside (0, {MAX_EXTENT}]")
        if self.label < 0:
            raise DataError(f"Negative label {self.label}")

    @property
    def area(self) -> float:
        return self.size[0] * self.size[1]


def _parse_label(value) -> int:
    """Category index from JSON: an int, or a float with no fractional part."""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DataError(f"label must be an integer, got {value!r}")
    if isinstance(value, float) and not value.is_integer():
        raise DataError(f"label must be an integer, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class Layout:
    positions: tuple[tuple[float, float], ...]

    def __post_init__(self):
        for p in self.positions:
            _check_finite(p, 'position')

    def __len__(self) -> int:
        return len(self.positions)

    def array(self) -> np.ndarray:
        return np.array(self.positions, dtype=np.float64).reshape(len(self.positions), 2)

    @classmethod
    def from_array(cls, positions) -> 'Layout':
        arr = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        return cls(tuple((float(x), float(y)) for x, y in arr))

    def mirrored(self) -> 'Layout':
        """Reflect across the line x = 0."""
        return Layout(tuple((-x, y) for x, y in self.positions))

    def translated(self, dx: float, dy: float) -> 'Layout':
        return Layout(tuple((x + dx, y + dy) for x, y in self.positions))

    def digest(self) -> str:
        return content_hash([list(p) for p in self.positions])


@dataclass(frozen=True)
class ArrangementExample:
    conditions: tuple[ObjectCondition, ...]
    goal: Layout
    domain: str

    def __post_init__(self):
        if not self.conditions:
            raise DataError("Arrangement example has no objects")
        if len(self.conditions) != len(self.goal):
            raise DataError(
                f"{len(self.conditions)} conditions but {len(self.goal)} positions"
            )
        if self.domain not in DOMAINS:
            raise DataError(f"Unknown domain '{self.domain}'")

    def canonical(self) -> 'ArrangementExample':
        conditions, goal = canonical_order(self.conditions, self.goal)
        return ArrangementExample(conditions, goal, self.domain)

    def is_canonical(self) -> bool:
        return self.canonical() == self

    def to_dict(self) -> dict:
        return {
            'domain': self.domain,
            'objects': [
                {'label': c.label, 'size': list(c.size), 'pos': list(p)}
                for c, p in zip(self.conditions, self.goal.positions)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> 'ArrangementExample':
        try:
            objects = doc['objects']
            conditions = tuple(
                ObjectCondition((float(o['size'][0]), float(o['size'][1])), _parse_label(o['label']))
                for o in objects
            )
            goal = Layout(tuple((float(o['pos'][0]), float(o['pos'][1])) for o in objects))
            return cls(conditions, goal, str(doc['domain']))
        except DataError:
            raise
        except (KeyError, TypeError, IndexError, ValueError) as e:
            raise DataError(f"Malformed example: missing or invalid field {e}") from e


@dataclass(frozen=True)
class Dataset:
    examples: tuple[ArrangementExample, ...]
    vocab: CategoryVocab
    normalization: tuple[float, float] = field(default=(1.2, 0.8))

    def __post_init__(self):
        for index, example in enumerate(self.examples):
            for c in example.conditions:
                if c.label >= len(self.vocab):
                    raise DataError(
                        f"Example {index}: label {c.label} outside vocab of size {len(self.vocab)}"
                    )

    def __len__(self) -> int:
        return len(self.examples)

    def header(self) -> dict:
        return {
            'format': DATASET_FORMAT,
            'version': DATASET_VERSION,
            'vocab': self.vocab.to_dict(),
            'normalization': {'table_extent_m': list(self.normalization)},
        }

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        return Dataset(tuple(self.examples[i] for i in indices), self.vocab, self.normalization)


def normalize(point: Sequence[float], frame: Sequence[float],
              origin: Sequence[float] = (0.0, 0.0)) -> tuple[float, float]:
    """
    Map a point of the source rectangle [origin, origin + frame] onto [-1, 1]^2.

    Example: (320, 120) in a 640x480 image -> (0.0, -0.5).
    """
    w, h = frame
    if not (w > 0 and h > 0):
        raise DataError(f"Frame extents must be positive, got {tuple(frame)}")
    _check_finite(point, 'point')
    x, y = point
    return (2.0 * (x - origin[0]) / w - 1.0, 2.0 * (y - origin[1]) / h - 1.0)


def denormalize(point: Sequence[float], frame: Sequence[float],
                origin: Sequence[float] = (0.0, 0.0)) -> tuple[float, float]:
    """Inverse of normalize."""
    w, h = frame
    if not (w > 0 and h > 0):
        raise DataError(f"Frame extents must be positive, got {tuple(frame)}")
    _check_finite(point, 'point')
    x, y = point
    return (origin[0] + (x + 1.0) * w / 2.0, origin[1] + (y + 1.0) * h / 2.0)


def canonical_order(conditions: Sequence[ObjectCondition],
                    layout: Layout) -> tuple[tuple[ObjectCondition, ...], Layout]:
    """
    Sort objects by (label ascending, size area descending, x ascending).

    The sort is stable, so full ties keep their input order and the
    operation is idempotent.
    """
    if len(conditions) != len(layout):
        raise DataError(f"{len(conditions)} conditions but {len(layout)} positions")
    order = sorted(
        range(len(conditions)),
        key=lambda i: (conditions[i].label, -conditions[i].area, layout.positions[i][0])
    )
    return (
        tuple(conditions[i] for i in order),
        Layout(tuple(layout.positions[i] for i in order)),
    )


def boxes_overlap(center_a, size_a, center_b, size_b, margin: float = 0.0) -> bool:
    """Strict axis-aligned overlap test; boxes that merely touch do not overlap."""
    dx = abs(center_a[0] - center_b[0])
    dy = abs(center_a[1] - center_b[1])
    return (dx < (size_a[0] + size_b[0]) / 2.0 + margin
            and dy < (size_a[1] + size_b[1]) / 2.0 + margin)


def overlapping_pairs(positions: Sequence[Sequence[float]],
                      sizes: Sequence[Sequence[float]],
                      margin: float = 0.0) -> list[tuple[int, int]]:
    """All index pairs (i < j) whose boxes overlap."""
    pairs = []
    for i in range(len(positions)):
        for j in range(i + 1, len(positions)):
            if boxes_overlap(positions[i], sizes[i], positions[j], sizes[j], margin):
                pairs.append((i, j))
    return pairs


def dataset_lines(dataset: Dataset) -> list[str]:
    """Serialize a dataset to JSONL lines (header first)."""
    lines = [json.dumps(dataset.header())]
    lines.extend(json.dumps(example.to_dict()) for example in dataset.examples)
    return lines


def write_dataset(dataset: Dataset, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, 'w') as f:
            for line in dataset_lines(dataset):
                f.write(line + '\n')
    except OSError as e:
        raise DataError(f"Cannot write dataset: {e.strerror}", path=path) from e


def parse_dataset_lines(lines: Iterable[str], vocab: CategoryVocab,
                        source: Path | str | None = None,
                        canonicalize: bool = True) -> Dataset:
    """
    Parse JSONL lines into a validated Dataset.

    All invalid lines are collected and reported together; the raised
    DataError carries the first offending line number.
    """
    examples = []
    errors = []
    normalization = vocab.table_extent_m
    for lineno, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            errors.append((lineno, f"malformed JSON ({e.msg})"))
            continue
        if isinstance(doc, dict) and doc.get('format') == DATASET_FORMAT:
            try:
                header_vocab = CategoryVocab.from_dict(doc.get('vocab', {}))
                extent = doc.get('normalization', {}).get('table_extent_m', list(normalization))
                extent = (float(extent[0]), float(extent[1]))
                _check_finite(extent, 'table extent')
            except DataError as e:
                errors.append((lineno, f"bad header: {e.message}"))
                continue
            except (AttributeError, TypeError, IndexError, ValueError) as e:
                errors.append((lineno, f"bad header: invalid normalization ({e})"))
                continue
            if header_vocab.digest() != vocab.digest():
                errors.append((lineno, f"header vocab '{header_vocab.name}' does not match '{vocab.name}'"))
            normalization = extent
            continue
        try:
            example = ArrangementExample.from_dict(doc)
            for c in example.conditions:
                if c.label >= len(vocab):
                    raise DataError(f"label {c.label} outside vocab of size {len(vocab)}")
        except DataError as e:
            errors.append((lineno, e.message))
            continue
        examples.append(example.canonical() if canonicalize else example)

    if errors:
        summary = '; '.join(f"line {n}: {msg}" for n, msg in errors)
        raise DataError(f"{len(errors)} invalid line(s): {summary}", path=source, line=errors[0][0])
    return Dataset(tuple(examples), vocab, normalization)


def read_dataset(path: Path, vocab: CategoryVocab | None = None) -> Dataset:
    """
    Read a dataset file. Without an explicit vocab the header's vocab is used.
    """
    path = Path(path)
    if not path.exists():
        raise DataError("File not found", path=path)
    with open(path) as f:
        lines = f.read().splitlines()
    if vocab is None:
        vocab = _header_vocab(lines, path)
    return parse_dataset_lines(lines, vocab, source=path)


def _header_vocab(lines: list[str], path: Path) -> CategoryVocab:
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as e:
            raise DataError(f"malformed JSON ({e.msg})", path=path, line=lineno) from e
        if isinstance(doc, dict) and doc.get('format') == DATASET_FORMAT:
            try:
                return CategoryVocab.from_dict(doc.get('vocab', {}))
            except DataError as e:
                raise DataError(e.message, path=path, line=lineno) from e
        # headerless file: infer from the first example's domain
        if isinstance(doc, dict) and 'domain' in doc:
            return vocab_for_domain(doc['domain'])
        break
    raise DataError("Cannot determine vocab: no header and no domain tag", path=path)


def read_scene(path: Path) -> ArrangementExample:
    """Read a single scene (one example object) from a JSON file."""
    path = Path(path)
    if not path.exists():
        raise DataError("File not found", path=path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"Malformed JSON: {e.msg}", path=path, line=e.lineno) from e
    try:
        return ArrangementExample.from_dict(doc)
    except DataError as e:
        raise DataError(e.message, path=path) from e


def write_scene(example: ArrangementExample, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(example.to_dict(), f, indent=2)
