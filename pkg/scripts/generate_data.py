#!/usr/bin/env python3
"""
Synthetic arrangement datasets and the JSONL importer.

The synthetic generator stands in for large-model distilled data: each
domain has a hand-built functional template (plate-centric dinner settings,
monitor/keyboard desks) that is jittered, thinned by optional-object dropout
and filtered for bounding-box overlap. Left-handed domains are the
right-handed (vanilla) draws mirrored across x = 0, so both handedness
variants of a seed share every random draw.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from layout_model import (
    DOMAINS,
    ArrangementExample,
    CategoryVocab,
    DataError,
    Dataset,
    Layout,
    ObjectCondition,
    overlapping_pairs,
    parse_dataset_lines,
    write_dataset,
)

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 1000
THREADS_ENV = 'LAYOUTPRIOR_THREADS'


@dataclass(frozen=True)
class TemplateSlot:
    category: str
    position: tuple[float, float]
    optional: bool = False


# Right-handed templates; left-handed layouts are their mirror images.
TEMPLATES = {
    'dinner': (
        TemplateSlot('plate', (0.0, -0.15)),
        TemplateSlot('fork', (-0.35, -0.15)),
        TemplateSlot('knife', (0.35, -0.15)),
        TemplateSlot('spoon', (0.5, -0.15), optional=True),
        TemplateSlot('cup', (0.45, 0.3), optional=True),
    ),
    'desk': (
        TemplateSlot('monitor', (0.0, 0.45)),
        TemplateSlot('keyboard', (0.0, 0.0)),
        TemplateSlot('mouse', (0.45, 0.0)),
        TemplateSlot('notebook', (-0.55, -0.05), optional=True),
        TemplateSlot('mug', (-0.55, 0.45), optional=True),
        TemplateSlot('pen', (0.45, -0.3), optional=True),
    ),
}


@dataclass(frozen=True)
class GeneratorConfig:
    domain: str
    jitter_std: float = 0.02
    seed: int = 0
    count: int = 100
    dropout: float = 0.0

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise DataError(f"Unknown domain '{self.domain}'")
        if self.jitter_std < 0:
            raise DataError(f"jitter_std must be >= 0, got {self.jitter_std}")
        if self.count < 1:
            raise DataError(f"count must be >= 1, got {self.count}")
        if not 0.0 <= self.dropout <= 1.0:
            raise DataError(f"dropout must be a probability, got {self.dropout}")


def worker_count() -> int:
    """Worker threads allowed by LAYOUTPRIOR_THREADS (default 1)."""
    value = os.environ.get(THREADS_ENV, '1')
    try:
        return max(1, int(value))
    except ValueError:
        logger.warning("Ignoring non-integer %s=%r", THREADS_ENV, value)
        return 1


def parallel_map(fn, items) -> list:
    """Order-preserving map over a thread pool capped by LAYOUTPRIOR_THREADS."""
    items = list(items)
    workers = worker_count()
    if workers == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def template_for(domain: str) -> tuple[TemplateSlot, ...]:
    scenario, _ = DOMAINS[domain]
    return TEMPLATES[scenario]


def template_positions(domain: str) -> dict[str, tuple[float, float]]:
    """Template position per category, already mirrored for left-handed domains."""
    _, left = DOMAINS[domain]
    return {
        slot.category: ((-slot.position[0], slot.position[1]) if left else slot.position)
        for slot in template_for(domain)
    }


def _generate_example(cfg: GeneratorConfig, vocab: CategoryVocab, index: int) -> ArrangementExample:
    rng = np.random.default_rng([cfg.seed, index])
    slots = template_for(cfg.domain)
    _, left = DOMAINS[cfg.domain]
    labels = [vocab.label(slot.category) for slot in slots]
    sizes = [vocab.entries[label].default_size for label in labels]
    base = np.array([slot.position for slot in slots], dtype=np.float64)
    optional = np.array([slot.optional for slot in slots])

    for attempt in range(MAX_ATTEMPTS):
        positions = base + rng.normal(0.0, 1.0, size=base.shape) * cfg.jitter_std
        dropped = (rng.random(len(slots)) < cfg.dropout) & optional
        keep = [i for i in range(len(slots)) if not dropped[i]]
        kept_positions = [tuple(positions[i]) for i in keep]
        kept_sizes = [sizes[i] for i in keep]
        if overlapping_pairs(kept_positions, kept_sizes):
            continue
        if attempt:
            logger.debug("Example %d accepted after %d rejected draws", index, attempt)
        layout = Layout(tuple((float(x), float(y)) for x, y in kept_positions))
        if left:
            layout = layout.mirrored()
        conditions = tuple(ObjectCondition(sizes[i], labels[i]) for i in keep)
        return ArrangementExample(conditions, layout, cfg.domain).canonical()

    raise DataError(
        f"Example {index}: no overlap-free layout after {MAX_ATTEMPTS} attempts "
        f"(jitter_std={cfg.jitter_std})"
    )


def synth_generate(cfg: GeneratorConfig, vocab: CategoryVocab) -> Dataset:
    """
    Sample a synthetic dataset from the domain template.

    Each example uses its own RNG stream derived from (seed, index), so the
    result does not depend on LAYOUTPRIOR_THREADS.

    Args:
        cfg: Domain, jitter, dropout, count and seed.
        vocab: Vocabulary of the domain's scenario.

    Returns:
        Canonical, overlap-free examples.

    Raises:
        DataError: Wrong vocab, or a template that keeps overlapping under the jitter.
    """
    scenario, _ = DOMAINS[cfg.domain]
    if vocab.name != scenario:
        raise DataError(f"Domain '{cfg.domain}' needs the '{scenario}' vocab, got '{vocab.name}'")
    examples = parallel_map(lambda i: _generate_example(cfg, vocab, i), range(cfg.count))
    logger.info("Generated %d %s examples (seed %d)", len(examples), cfg.domain, cfg.seed)
    return Dataset(tuple(examples), vocab, vocab.table_extent_m)


def import_examples(path: Path, vocab: CategoryVocab) -> Dataset:
    """
    Load externally produced examples, validating and canonically ordering each.
    """
    path = Path(path)
    if not path.exists():
        raise DataError("File not found", path=path)
    with open(path) as f:
        lines = f.read().splitlines()
    dataset = parse_dataset_lines(lines, vocab, source=path, canonicalize=True)
    logger.info("Imported %d examples from %s", len(dataset), path)
    return dataset


def export_examples(dataset: Dataset, path: Path) -> None:
    write_dataset(dataset, path)
    logger.info("Wrote %d examples to %s", len(dataset), path)


def split_dataset(dataset: Dataset, test_count: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded (train, test) split holding out test_count examples."""
    if not 0 < test_count < len(dataset):
        raise DataError(f"test_count must be in (0, {len(dataset)}), got {test_count}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    test = sorted(int(i) for i in order[:test_count])
    train = sorted(int(i) for i in order[test_count:])
    return dataset.subset(train), dataset.subset(test)
