#!/usr/bin/env python3
"""
Two-stage arrangement data pipeline behind provider interfaces.

Stage one asks an image generator for a picture of a functional scene and
runs an object detector on it. Stage two asks a refiner to repair the
detections: first delete objects that are off-prompt or redundant, then
reposition the survivors into a functional layout.

Real providers (text-to-image models, open-vocabulary detectors, language
models) plug in through the Protocol classes below. The mocks shipped
here are deterministic and offline:

- MockImageGenerator renders the domain template with the typical failure
  modes of text-to-image output: jitter, duplicated objects, objects that
  were never asked for and the handedness of the scene ignored.
- MockDetector reads the mock image's objects back in image-normalized units.
- MockRefiner applies mock_refine.
- MockLayoutProposer skips the image stage: a language model writes the
  coordinates straight from the prompt (the baseline without images).

Image coordinates are mapped to table coordinates with layout_model.normalize
over the unit image frame. Real providers need a calibration step here.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from layout_model import (
    DOMAINS,
    ArrangementExample,
    CategoryVocab,
    DataError,
    Dataset,
    Layout,
    ObjectCondition,
    denormalize,
    normalize,
)
from generate_data import template_positions

logger = logging.getLogger(__name__)

PROMPT_TEMPLATE = "Realistic photo of {adjective} {setting} with {objects}{tail}"

NUMBER_WORDS = ('zero', 'one', 'two', 'three', 'four', 'five',
                'six', 'seven', 'eight', 'nine', 'ten')

IRREGULAR_PLURALS = {'knife': 'knives', 'mouse': 'mice', 'glass': 'glasses'}

# Categories a text-to-image model likes to add on its own
OFF_PROMPT_CATEGORIES = ('vase', 'napkin', 'phone', 'candle')

IMAGE_FRAME = (1.0, 1.0)
SNAP_GAP = 0.02


@dataclass(frozen=True)
class PromptSpec:
    adjective: str
    setting: str
    object_counts: tuple[tuple[str, int], ...]
    functional_layout: str
    viewpoint: str

    def __post_init__(self):
        if not self.object_counts:
            raise DataError("Prompt needs at least one object")
        for category, count in self.object_counts:
            if count < 1:
                raise DataError(f"Count for '{category}' must be positive, got {count}")

    def counts(self) -> dict[str, int]:
        totals: dict[str, int] = defaultdict(int)
        for category, count in self.object_counts:
            totals[category] += count
        return dict(totals)


@dataclass(frozen=True)
class DetectedObject:
    center: tuple[float, float]
    extent: tuple[float, float]
    category: str
    confidence: float

    def __post_init__(self):
        if not all(e > 0 for e in self.extent):
            raise DataError(f"Detection extent must be positive, got {self.extent}")
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"Detection confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class RefinementResult:
    kept: tuple[DetectedObject, ...]
    removed: tuple[DetectedObject, ...]
    rationale: str


@dataclass(frozen=True)
class ProposedObject:
    """A placement written out by a language model, in table coordinates."""

    category: str
    center: tuple[float, float]


@dataclass(frozen=True)
class MockImage:
    width: int
    height: int
    # (category, center px, extent px, confidence)
    objects: tuple[tuple[str, tuple[float, float], tuple[float, float], float], ...] = field(default=())


class ImageGenerator(Protocol):
    def generate(self, prompt: str, spec: PromptSpec, seed: int): ...


class Detector(Protocol):
    def detect(self, image) -> list[DetectedObject]: ...


class Refiner(Protocol):
    def refine(self, detections: Sequence[DetectedObject], spec: PromptSpec) -> RefinementResult: ...


class LayoutProposer(Protocol):
    def propose(self, prompt: str, spec: PromptSpec, seed: int) -> list[ProposedObject]: ...


def count_word(count: int) -> str:
    """one .. ten as words, digits beyond."""
    return NUMBER_WORDS[count] if count <= 10 else str(count)


def pluralize(noun: str) -> str:
    if noun in IRREGULAR_PLURALS:
        return IRREGULAR_PLURALS[noun]
    if noun.endswith(('s', 'x', 'ch', 'sh')):
        return noun + 'es'
    if noun.endswith('y') and noun[-2:-1] not in 'aeiou':
        return noun[:-1] + 'ies'
    return noun + 's'


def build_prompt(spec: PromptSpec, vocab: CategoryVocab) -> str:
    """
    Fill the image prompt template.

    Example: "Realistic photo of the non-overlapping, well-organized table
    setting with one cup, one plate, left-handed layout, top-down"
    """
    for category, _ in spec.object_counts:
        if not vocab.has(category):
            raise DataError(f"Unknown category '{category}' in prompt")
    objects = ', '.join(
        f"{count_word(count)} {category if count == 1 else pluralize(category)}"
        for category, count in spec.object_counts
    )
    tail = ''.join(f", {part}" for part in (spec.functional_layout, spec.viewpoint) if part)
    return PROMPT_TEMPLATE.format(
        adjective=spec.adjective,
        setting=spec.setting,
        objects=objects,
        tail=tail,
    )


def default_prompt(domain: str) -> PromptSpec:
    """Canonical prompt for one of the four domains."""
    if domain not in DOMAINS:
        raise DataError(f"Unknown domain '{domain}'")
    scenario, left = DOMAINS[domain]
    handedness = 'left-handed layout' if left else 'right-handed layout'
    if scenario == 'dinner':
        setting = 'table setting'
        objects = (('plate', 1), ('fork', 1), ('knife', 1), ('spoon', 1), ('cup', 1))
    else:
        setting = 'office desk'
        objects = (('monitor', 1), ('keyboard', 1), ('mouse', 1), ('notebook', 1), ('mug', 1))
    return PromptSpec(
        adjective='the non-overlapping, well-organized',
        setting=setting,
        object_counts=objects,
        functional_layout=handedness,
        viewpoint='top-down',
    )


def prompt_for_conditions(domain: str, conditions: Sequence[ObjectCondition],
                          vocab: CategoryVocab) -> PromptSpec:
    """Domain prompt asking for exactly the objects of a scene."""
    counts: dict[str, int] = {}
    for c in conditions:
        name = vocab.entries[c.label].name
        counts[name] = counts.get(name, 0) + 1
    return replace(default_prompt(domain), object_counts=tuple(counts.items()))


def table_to_image(point: Sequence[float]) -> tuple[float, float]:
    return denormalize(point, IMAGE_FRAME)


def image_to_table(point: Sequence[float]) -> tuple[float, float]:
    return normalize(point, IMAGE_FRAME)


def mock_refine(detections: Sequence[DetectedObject], spec: PromptSpec,
                domain: str) -> RefinementResult:
    """
    Deterministic stand-in for the two-phase language-model refinement.

    Phase 1 removes categories the prompt never asked for and duplicates
    beyond the prompt's counts (highest confidence wins, ties go to the
    smaller detection index). Phase 2 moves every kept object onto the
    domain's functional template, preserving its detected size. Additional
    instances of a category are placed next to the first one, stepping away
    from the table center.
    """
    if not detections:
        raise DataError("No detections to refine")
    wanted = spec.counts()
    by_category: dict[str, list[int]] = defaultdict(list)
    for index, det in enumerate(detections):
        by_category[det.category].append(index)

    keep_indices = set()
    for category, indices in by_category.items():
        quota = wanted.get(category, 0)
        ranked = sorted(indices, key=lambda i: (-detections[i].confidence, i))
        keep_indices.update(ranked[:quota])

    removed = tuple(d for i, d in enumerate(detections) if i not in keep_indices)
    if len(removed) == len(detections):
        raise DataError("Refinement removed every detection; scene is irrecoverable")

    template = template_positions(domain)
    instance: dict[str, int] = defaultdict(int)
    kept = []
    for index, det in enumerate(detections):
        if index not in keep_indices:
            continue
        k = instance[det.category]
        instance[det.category] += 1
        if det.category not in template:
            kept.append(det)
            continue
        x, y = template[det.category]
        width = det.extent[0] * 2.0 / IMAGE_FRAME[0]
        outward = 1.0 if x >= 0 else -1.0
        target = (x + outward * k * (width + SNAP_GAP), y)
        kept.append(replace(det, center=table_to_image(target)))

    rationale = 'snapped' if not removed else f"removed {len(removed)}; snapped"
    return RefinementResult(tuple(kept), removed, rationale)


def detections_to_example(detections: Sequence[DetectedObject], domain: str,
                          vocab: CategoryVocab) -> ArrangementExample:
    """Convert image-normalized detections into a canonical table-frame example."""
    conditions = []
    positions = []
    for det in detections:
        size = (det.extent[0] * 2.0 / IMAGE_FRAME[0], det.extent[1] * 2.0 / IMAGE_FRAME[1])
        conditions.append(ObjectCondition(size, vocab.label(det.category)))
        positions.append(image_to_table(det.center))
    return ArrangementExample(tuple(conditions), Layout(tuple(positions)), domain).canonical()


class MockImageGenerator:
    """Renders the domain template with text-to-image style mistakes."""

    def __init__(self, domain: str, vocab: CategoryVocab, width: int = 1024, height: int = 1024,
                 jitter_std: float = 0.04, duplicate_prob: float = 0.3,
                 off_prompt_prob: float = 0.3, flip_prob: float = 0.4):
        self.domain = domain
        self.vocab = vocab
        self.width = width
        self.height = height
        self.jitter_std = jitter_std
        self.duplicate_prob = duplicate_prob
        self.off_prompt_prob = off_prompt_prob
        self.flip_prob = flip_prob

    def _size(self, category: str, rng: np.random.Generator) -> tuple[float, float]:
        base = self.vocab.entries[self.vocab.label(category)].default_size if self.vocab.has(category) else (0.15, 0.15)
        scale = rng.uniform(0.9, 1.1)
        return (base[0] * scale, base[1] * scale)

    def _pixel(self, category, center, size, confidence):
        cx, cy = denormalize(center, (self.width, self.height))
        extent = (size[0] * self.width / 2.0, size[1] * self.height / 2.0)
        return (category, (cx, cy), extent, float(confidence))

    def generate(self, prompt: str, spec: PromptSpec, seed: int) -> MockImage:
        rng = np.random.default_rng(seed)
        template = template_positions(self.domain)
        flip = rng.random() < self.flip_prob
        objects = []
        for category, count in spec.object_counts:
            for _ in range(count):
                if category in template:
                    x, y = template[category]
                    if flip:
                        x = -x
                else:
                    x, y = rng.uniform(-0.7, 0.7, size=2)
                center = np.clip(np.array([x, y]) + rng.normal(0.0, self.jitter_std, size=2), -0.95, 0.95)
                objects.append(self._pixel(category, center, self._size(category, rng), rng.uniform(0.6, 1.0)))
        if rng.random() < self.duplicate_prob:
            category = spec.object_counts[int(rng.integers(len(spec.object_counts)))][0]
            center = rng.uniform(-0.8, 0.8, size=2)
            objects.append(self._pixel(category, center, self._size(category, rng), rng.uniform(0.3, 0.9)))
        if rng.random() < self.off_prompt_prob:
            category = OFF_PROMPT_CATEGORIES[int(rng.integers(len(OFF_PROMPT_CATEGORIES)))]
            center = rng.uniform(-0.8, 0.8, size=2)
            objects.append(self._pixel(category, center, self._size(category, rng), rng.uniform(0.4, 1.0)))
        logger.debug("Mock image for %r: %d objects (flip=%s)", prompt, len(objects), flip)
        return MockImage(self.width, self.height, tuple(objects))


class MockDetector:
    """Returns the mock image's objects in image-normalized units."""

    def detect(self, image: MockImage) -> list[DetectedObject]:
        return [
            DetectedObject(
                center=(cx / image.width, cy / image.height),
                extent=(ex / image.width, ey / image.height),
                category=category,
                confidence=confidence,
            )
            for category, (cx, cy), (ex, ey), confidence in image.objects
        ]


class MockRefiner:
    def __init__(self, domain: str):
        self.domain = domain

    def refine(self, detections: Sequence[DetectedObject], spec: PromptSpec) -> RefinementResult:
        return mock_refine(detections, spec, self.domain)


class MockLayoutProposer:
    """
    Language model asked for coordinates directly, without an image.

    It knows roughly where each category belongs but writes round numbers
    (a grid of `grid` table units), does not reason about object sizes, and
    confuses left and right with probability flip_prob.
    """

    def __init__(self, domain: str, coord_std: float = 0.1, grid: float = 0.1,
                 flip_prob: float = 0.4, instance_step: float = 0.2):
        self.domain = domain
        self.coord_std = coord_std
        self.grid = grid
        self.flip_prob = flip_prob
        self.instance_step = instance_step

    def _snap(self, value: float) -> float:
        return float(np.clip(np.round(value / self.grid) * self.grid, -0.9, 0.9))

    def propose(self, prompt: str, spec: PromptSpec, seed: int) -> list[ProposedObject]:
        rng = np.random.default_rng(seed)
        template = template_positions(self.domain)
        flip = rng.random() < self.flip_prob
        proposals = []
        for category, count in spec.object_counts:
            for k in range(count):
                if category in template:
                    x, y = template[category]
                    if flip:
                        x = -x
                    outward = 1.0 if x >= 0 else -1.0
                    x += outward * k * self.instance_step
                else:
                    x, y = rng.uniform(-0.7, 0.7, size=2)
                x, y = np.array([x, y]) + rng.normal(0.0, self.coord_std, size=2)
                proposals.append(ProposedObject(category, (self._snap(x), self._snap(y))))
        logger.debug("Mock direct layout for %r: %d objects (flip=%s)", prompt, len(proposals), flip)
        return proposals


def example_seed(seed: int, index: int) -> int:
    """Per-example provider seed derived from (seed, index)."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def run_pipeline(spec: PromptSpec, domain: str, vocab: CategoryVocab, count: int, seed: int,
                 generator: ImageGenerator | None = None, detector: Detector | None = None,
                 refiner: Refiner | None = None, refine: bool = True) -> Dataset:
    """
    Collect count examples through generate -> detect -> refine.

    With refine=False the raw detections are kept whenever every category is
    in the vocab (the ablation without the refinement stage). Irrecoverable
    scenes are skipped; at most 10 * count scenes are tried.
    """
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    generator = generator or MockImageGenerator(domain, vocab)
    detector = detector or MockDetector()
    refiner = refiner or MockRefiner(domain)
    prompt = build_prompt(spec, vocab)

    examples = []
    attempts = 0
    while len(examples) < count and attempts < 10 * count:
        image = generator.generate(prompt, spec, example_seed(seed, attempts))
        attempts += 1
        detections = detector.detect(image)
        if refine:
            try:
                detections = list(refiner.refine(detections, spec).kept)
            except DataError as e:
                logger.warning("Skipping scene %d: %s", attempts - 1, e)
                continue
        else:
            detections = [d for d in detections if vocab.has(d.category)]
            if not detections:
                continue
        examples.append(detections_to_example(detections, domain, vocab))

    if len(examples) < count:
        raise DataError(f"Only {len(examples)} of {count} scenes survived after {attempts} attempts")
    logger.info("Pipeline produced %d %s examples in %d attempts", count, domain, attempts)
    return Dataset(tuple(examples), vocab, vocab.table_extent_m)
