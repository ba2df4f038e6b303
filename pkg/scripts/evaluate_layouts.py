#!/usr/bin/env python3
"""
Quantitative evaluation of generated goal layouts.

Coverage: for every ground-truth layout, the squared L2 distance to the
closest generated layout with the same objects, summed (lower is better).

Marginal KL: the distribution of the displacement between two categories
(e.g. plate -> fork) is estimated with a 2D Gaussian KDE on a shared grid
for the reference and the generated data, and compared with KL(P || Q).
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from layout_model import ArrangementExample, CategoryVocab, DataError, Dataset

logger = logging.getLogger(__name__)

KL_REPORT_SCALE = 100.0
MIN_PAIR_SCENES = 5


def coverage_score(generated: Sequence[ArrangementExample], ground_truth: Sequence[ArrangementExample]) -> float:
    """
    Sum over ground-truth scenes of the minimum squared distance between the
    flattened position vectors and any generated scene with identical
    (canonically ordered) conditions.

    Args:
        generated: Candidate layouts.
        ground_truth: Reference scenes.

    Returns:
        The score; lower is better.

    Raises:
        DataError: A ground-truth scene has no generated scene with the same conditions.
    """
    pools: dict[tuple, list[np.ndarray]] = {}
    for ex in generated:
        ex = ex.canonical()
        pools.setdefault(ex.conditions, []).append(ex.goal.array().ravel())
    matrices = {key: np.stack(rows) for key, rows in pools.items()}

    groups: dict[tuple, list[tuple[int, np.ndarray]]] = {}
    for index, ex in enumerate(ground_truth):
        ex = ex.canonical()
        groups.setdefault(ex.conditions, []).append((index, ex.goal.array().ravel()))

    total = 0.0
    for key, members in groups.items():
        if key not in matrices:
            raise DataError(
                f"Ground-truth scene {members[0][0]} has no generated layout with the same objects"
            )
        gt = np.stack([row for _, row in members])
        total += float(cdist(gt, matrices[key], 'sqeuclidean').min(axis=1).sum())
    return total


@dataclass(frozen=True)
class KdeConfig:
    bandwidth: tuple[float, float] | None = None
    resolution: int = 64
    window: tuple[float, float] = (-1.5, 1.5)
    delta: float = 1e-12
    fallback_bandwidth: float = 0.05

    def __post_init__(self):
        if self.bandwidth is not None and not all(h > 0 for h in self.bandwidth):
            raise DataError(f"Bandwidths must be positive, got {self.bandwidth}")
        if self.resolution < 8:
            raise DataError(f"resolution must be >= 8, got {self.resolution}")
        if not self.window[0] < self.window[1]:
            raise DataError(f"Empty KDE window {self.window}")
        if self.delta < 0:
            raise DataError("delta must be >= 0")


@dataclass(frozen=True)
class KdeGrid:
    centers: np.ndarray          # (resolution,) cell centers, shared by x and y
    density: np.ndarray          # (resolution, resolution), rows are y
    bandwidth: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            'centers': self.centers.tolist(),
            'bandwidth': list(self.bandwidth),
            'density': self.density.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> 'KdeGrid':
        try:
            centers = np.asarray(doc['centers'], dtype=np.float64)
            density = np.asarray(doc['density'], dtype=np.float64)
            bandwidth = (float(doc['bandwidth'][0]), float(doc['bandwidth'][1]))
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise DataError(f"Malformed KDE grid: {e}") from e
        if density.shape != (centers.size, centers.size):
            raise DataError(f"KDE density of shape {density.shape} does not match {centers.size} centers")
        return cls(centers, density, bandwidth)


def gaussian_kernel(u):
    """K(u) = exp(-u^2 / 2) / (2 pi)."""
    return np.exp(-0.5 * np.asarray(u) ** 2) / (2.0 * np.pi)


def kde_evaluate(points, samples, bandwidth: tuple[float, float]) -> np.ndarray:
    """
    Raw estimate f(x, y) = 1/(n hx hy) sum_i K((x - xi)/hx) K((y - yi)/hy).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    hx, hy = bandwidth
    kx = gaussian_kernel((points[:, None, 0] - samples[None, :, 0]) / hx)
    ky = gaussian_kernel((points[:, None, 1] - samples[None, :, 1]) / hy)
    return (kx * ky).sum(axis=1) / (samples.shape[0] * hx * hy)


def scott_bandwidth(samples: np.ndarray, fallback: float = 0.05) -> tuple[float, float]:
    """Scott's rule in 2D, h = n^(-1/6) * std, per axis."""
    n = samples.shape[0]
    std = samples.std(axis=0, ddof=1)
    out = []
    for axis, s in zip('xy', std):
        if s > 0 and math.isfinite(s):
            out.append(float(n ** (-1.0 / 6.0) * s))
        else:
            logger.warning("Zero variance along %s; using fixed bandwidth %g", axis, fallback)
            out.append(fallback)
    return (out[0], out[1])


def grid_centers(cfg: KdeConfig) -> np.ndarray:
    edges = np.linspace(cfg.window[0], cfg.window[1], cfg.resolution + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def kde_density(samples, cfg: KdeConfig = KdeConfig()) -> KdeGrid:
    """
    KDE of 2D samples on the configured lattice, renormalized to sum to 1.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if samples.shape[0] < 2:
        raise DataError(f"KDE needs at least 2 samples, got {samples.shape[0]}")
    bandwidth = cfg.bandwidth or scott_bandwidth(samples, cfg.fallback_bandwidth)
    centers = grid_centers(cfg)
    gx, gy = np.meshgrid(centers, centers, indexing='xy')
    raw = kde_evaluate(np.column_stack([gx.ravel(), gy.ravel()]), samples, bandwidth)
    raw = raw.reshape(cfg.resolution, cfg.resolution)
    total = raw.sum()
    if total <= 0:
        raise DataError("KDE has no mass inside the evaluation window")
    return KdeGrid(centers, raw / total, bandwidth)


def kl_divergence(p, q, delta: float = 1e-12) -> float:
    """KL(P || Q) in nats over matching cells, sum P ln((P + d) / (Q + d))."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise DataError(f"Distributions differ in size: {p.size} vs {q.size}")
    if np.any(p < 0) or np.any(q < 0):
        raise DataError("Distributions must be non-negative")
    return float(np.sum(p * np.log((p + delta) / (q + delta))))


@dataclass(frozen=True)
class PairSpec:
    anchor: str
    target: str

    @property
    def name(self) -> str:
        return f"{self.anchor.capitalize()}2{self.target.capitalize()}"

    @classmethod
    def parse(cls, text: str) -> 'PairSpec':
        """Accept 'plate:fork' or 'plate2fork' (case-insensitive)."""
        lowered = text.strip().lower()
        for sep in (':', '2'):
            if sep in lowered:
                anchor, _, target = lowered.partition(sep)
                if anchor and target:
                    return cls(anchor, target)
        raise DataError(f"Cannot parse category pair '{text}' (expected anchor:target)")

    def validate(self, vocab: CategoryVocab) -> tuple[int, int]:
        return vocab.label(self.anchor), vocab.label(self.target)


def displacements(dataset: Dataset, pair: PairSpec) -> tuple[np.ndarray, int]:
    """
    Target-minus-anchor offsets for every anchor/target instance pair.

    Returns the (m, 2) offsets and the number of scenes contributing.
    """
    anchor, target = pair.validate(dataset.vocab)
    rows = []
    scenes = 0
    for ex in dataset.examples:
        anchors = [p for c, p in zip(ex.conditions, ex.goal.positions) if c.label == anchor]
        targets = [p for c, p in zip(ex.conditions, ex.goal.positions) if c.label == target]
        if anchors and targets:
            scenes += 1
            rows.extend((tx - ax, ty - ay) for ax, ay in anchors for tx, ty in targets)
    return np.array(rows, dtype=np.float64).reshape(-1, 2), scenes


def marginal_kl(generated: Dataset, reference: Dataset, pair: PairSpec,
                cfg: KdeConfig = KdeConfig()) -> float:
    """
    KL(reference || generated) of the pair's displacement densities, in nats.

    Raises:
        DataError: Fewer than MIN_PAIR_SCENES scenes hold both categories.
    """
    ref_offsets, ref_scenes = displacements(reference, pair)
    gen_offsets, gen_scenes = displacements(generated, pair)
    if ref_scenes < MIN_PAIR_SCENES or gen_scenes < MIN_PAIR_SCENES:
        raise DataError(
            f"{pair.name}: need >= {MIN_PAIR_SCENES} scenes with both categories, "
            f"reference has {ref_scenes}, generated has {gen_scenes}"
        )
    p = kde_density(ref_offsets, cfg)
    q = kde_density(gen_offsets, cfg)
    return kl_divergence(p.density, q.density, cfg.delta)


@dataclass(frozen=True)
class EvalRow:
    domain: str
    metric: str
    pair: str
    value: float
    n_scenes: int


def _domain_label(dataset: Dataset) -> str:
    domains = sorted({ex.domain for ex in dataset.examples})
    return '+'.join(domains) if domains else 'none'


def evaluate_coverage(generated: Dataset, reference: Dataset) -> EvalRow:
    value = coverage_score(generated.examples, reference.examples)
    logger.info("coverage %.6f over %d reference scenes", value, len(reference))
    return EvalRow(_domain_label(reference), 'coverage', '', value, len(reference))


def evaluate_marginal_kl(generated: Dataset, reference: Dataset, pairs: Sequence[PairSpec],
                         cfg: KdeConfig = KdeConfig(), dump_dir: Path | None = None) -> list[EvalRow]:
    """
    One row per pair, KL scaled by 100. Optionally dump both KDE grids of each
    pair as JSON matrices for plotting.
    """
    rows = []
    for pair in pairs:
        value = marginal_kl(generated, reference, pair, cfg) * KL_REPORT_SCALE
        _, scenes = displacements(reference, pair)
        rows.append(EvalRow(_domain_label(reference), 'marginal_kl', pair.name, value, scenes))
        logger.info("%s marginal KL x100 = %.4f", pair.name, value)
        if dump_dir is not None:
            for tag, dataset in (('reference', reference), ('generated', generated)):
                grid = kde_density(displacements(dataset, pair)[0], cfg)
                write_kde_grid(grid, Path(dump_dir) / f"{pair.name}-{tag}.json")
    return rows


def write_kde_grid(grid: KdeGrid, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(grid.to_dict(), f)


def read_kde_grid(path: Path) -> KdeGrid:
    path = Path(path)
    if not path.exists():
        raise DataError("File not found", path=path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"Malformed JSON: {e.msg}", path=path, line=e.lineno) from e
    try:
        return KdeGrid.from_dict(doc)
    except DataError as e:
        raise DataError(e.message, path=path) from e


REPORT_FIELDS = ['domain', 'metric', 'pair', 'value', 'n_scenes']


def write_report(rows: Sequence[EvalRow], path: Path) -> None:
    """Write evaluation rows as CSV (domain, metric, pair, value, n_scenes)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for row in rows:
            doc = asdict(row)
            doc['value'] = repr(float(row.value))
            writer.writerow(doc)
