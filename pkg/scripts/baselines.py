#!/usr/bin/env python3
"""
Reference baselines for goal-layout generation.

- rand-no-coll: uniform random placement on the table, rejecting overlaps.
- filter-rejection: query the unrefined image pipeline until a scene with
  no duplicated items and no overlapping objects comes back, then read the
  layout off that scene.
- llm-direct: ask a language model for the coordinates straight from the
  prompt, with no image generation or detection in between.
"""

import logging
from typing import Sequence

import numpy as np

from layout_model import (
    ArrangementExample,
    CategoryVocab,
    DataError,
    Dataset,
    Layout,
    ObjectCondition,
    boxes_overlap,
    overlapping_pairs,
)
from generate_data import parallel_map
from distill_pipeline import (
    Detector,
    ImageGenerator,
    LayoutProposer,
    MockDetector,
    MockImageGenerator,
    MockLayoutProposer,
    build_prompt,
    image_to_table,
    prompt_for_conditions,
)

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 1000
MAX_FILTER_ATTEMPTS = 10

METHODS = ('rand-no-coll', 'filter-rejection', 'llm-direct')


def _uniform_center(size: Sequence[float], rng: np.random.Generator) -> tuple[float, float]:
    half_w, half_h = min(size[0], 2.0) / 2.0, min(size[1], 2.0) / 2.0
    return (float(rng.uniform(-1.0 + half_w, 1.0 - half_w)),
            float(rng.uniform(-1.0 + half_h, 1.0 - half_h)))


def rand_no_coll(conditions: Sequence[ObjectCondition], rng: np.random.Generator,
                 max_attempts: int = MAX_PLACEMENT_ATTEMPTS) -> Layout:
    """
    Place objects one at a time, uniformly inside the table, redrawing any
    position whose box overlaps an already placed object.
    """
    placed: list[tuple[float, float]] = []
    for index, c in enumerate(conditions):
        for _ in range(max_attempts):
            center = _uniform_center(c.size, rng)
            if not any(boxes_overlap(center, c.size, p, conditions[k].size) for k, p in enumerate(placed)):
                placed.append(center)
                break
        else:
            raise DataError(f"Object {index}: no collision-free placement after {max_attempts} attempts")
    return Layout(tuple(placed))


def _placements(detections):
    return [(d.category, image_to_table(d.center)) for d in detections]


def _match_placements(conditions, placements, vocab: CategoryVocab):
    """
    Positions for the conditions taken from same-category (category, table
    position) placements.

    The k-th instance of a category (in condition order) takes the k-th
    placement of that category ordered by x. Unmatched conditions get None.
    """
    pools: dict[str, list] = {}
    for category, center in sorted(placements, key=lambda p: p[1][0]):
        pools.setdefault(category, []).append(center)
    positions = []
    for c in conditions:
        pool = pools.get(vocab.entries[c.label].name, [])
        positions.append(pool.pop(0) if pool else None)
    return positions


def _passes_filters(detections, wanted: dict[str, int], sizes) -> bool:
    counts: dict[str, int] = {}
    for det in detections:
        counts[det.category] = counts.get(det.category, 0) + 1
    if counts != wanted:
        return False
    centers = [image_to_table(d.center) for d in detections]
    return not overlapping_pairs(centers, sizes)


def filter_rejection(conditions: Sequence[ObjectCondition], domain: str, vocab: CategoryVocab,
                     rng: np.random.Generator, generator: ImageGenerator | None = None,
                     detector: Detector | None = None,
                     max_attempts: int = MAX_FILTER_ATTEMPTS) -> Layout:
    """
    Rejection-sample the unrefined pipeline for the scene's objects.

    A scene is accepted when its detections match the requested categories
    and counts exactly (no duplicates, nothing off-prompt) and no two
    detected boxes overlap. After max_attempts the last scene is used, and
    objects it did not show are placed uniformly at random.
    """
    if not conditions:
        raise DataError("Cannot generate a layout for zero objects")
    generator = generator or MockImageGenerator(domain, vocab)
    detector = detector or MockDetector()
    spec = prompt_for_conditions(domain, conditions, vocab)
    prompt = build_prompt(spec, vocab)
    wanted = spec.counts()

    detections = []
    for attempt in range(max_attempts):
        image = generator.generate(prompt, spec, int(rng.integers(2 ** 32)))
        detections = detector.detect(image)
        sizes = [(d.extent[0] * 2.0, d.extent[1] * 2.0) for d in detections]
        if _passes_filters(detections, wanted, sizes):
            logger.debug("filter-rejection accepted scene after %d attempts", attempt + 1)
            return Layout(tuple(_match_placements(conditions, _placements(detections), vocab)))

    logger.warning("filter-rejection: no scene passed the filters in %d attempts; using the last one",
                   max_attempts)
    positions = _match_placements(conditions, _placements(detections), vocab)
    return Layout(tuple(p if p is not None else _uniform_center(c.size, rng)
                        for p, c in zip(positions, conditions)))


def llm_direct(conditions: Sequence[ObjectCondition], domain: str, vocab: CategoryVocab,
               rng: np.random.Generator, proposer: LayoutProposer | None = None) -> Layout:
    """
    Layout written by a language model straight from the prompt.

    Nothing checks the answer for overlaps. Objects the model left out are
    placed uniformly at random.

    Args:
        conditions: Objects to place.
        domain: Domain whose prompt is used.
        vocab: Category vocabulary of the conditions.
        rng: Source of the proposer seed and of fallback placements.
        proposer: Language model; MockLayoutProposer(domain) by default.

    Returns:
        One position per condition.

    Raises:
        DataError: conditions is empty.
    """
    if not conditions:
        raise DataError("Cannot generate a layout for zero objects")
    proposer = proposer or MockLayoutProposer(domain)
    spec = prompt_for_conditions(domain, conditions, vocab)
    proposals = proposer.propose(build_prompt(spec, vocab), spec, int(rng.integers(2 ** 32)))
    positions = _match_placements(conditions, [(p.category, p.center) for p in proposals], vocab)
    missing = sum(p is None for p in positions)
    if missing:
        logger.debug("llm-direct: %d object(s) missing from the answer; placing them at random", missing)
    return Layout(tuple(p if p is not None else _uniform_center(c.size, rng)
                        for p, c in zip(positions, conditions)))


def generate_baseline(reference: Dataset, method: str, samples_per_scene: int, seed: int) -> Dataset:
    """
    Baseline goals for the conditions of every scene in a reference dataset.

    Scene k draws from its own RNG stream (seed, k).

    Args:
        reference: Scenes whose conditions are reused.
        method: One of METHODS.
        samples_per_scene: Layouts per reference scene.
        seed: Base seed.

    Returns:
        Canonical examples, samples_per_scene per reference scene.

    Raises:
        DataError: Unknown method, or samples_per_scene < 1.
    """
    if method not in METHODS:
        raise DataError(f"Unknown baseline '{method}' (expected one of {', '.join(METHODS)})")
    if samples_per_scene < 1:
        raise DataError("samples_per_scene must be >= 1")

    def scene_samples(item):
        index, example = item
        rng = np.random.default_rng([seed, index])
        out = []
        for _ in range(samples_per_scene):
            if method == 'rand-no-coll':
                layout = rand_no_coll(example.conditions, rng)
            elif method == 'llm-direct':
                layout = llm_direct(example.conditions, example.domain, reference.vocab, rng)
            else:
                layout = filter_rejection(example.conditions, example.domain, reference.vocab, rng)
            out.append(ArrangementExample(example.conditions, layout, example.domain).canonical())
        return out

    groups = parallel_map(scene_samples, enumerate(reference.examples))
    examples = tuple(ex for group in groups for ex in group)
    logger.info("Generated %d %s layouts for %d scenes", len(examples), method, len(reference))
    return Dataset(examples, reference.vocab, reference.normalization)
