#!/usr/bin/env python3
"""
Variance-exploding diffusion over object layouts.

- NoiseSchedule: sigma(t) = sigma_min * (sigma_max / sigma_min) ** t.
- dsm_loss / train: denoising score matching with Adam.
- rk45_integrate: adaptive Dormand-Prince 5(4) integrator.
- sample: probability-flow ODE from t = 1 down to the time floor.

Two notation clashes are resolved here: the loss weight lambda(t) defaults to
sigma(t)^2, and the "500 steps" of the training notes is the step count of
the fixed-step Euler sampler, while the time floor epsilon is 1e-3.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from tqdm import tqdm

from layout_model import (
    ArrangementExample,
    DataError,
    Dataset,
    Layout,
    NumericalError,
    ObjectCondition,
)
from score_network import (
    Checkpoint,
    GraphBatch,
    ScoreNetConfig,
    ScoreNetParams,
    backward,
    forward,
    save_checkpoint,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 50.0

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise DataError(f"Need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def sigma(self, t):
        """Noise level at time t in [0, 1]; scalar or array."""
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or not np.isfinite(t_arr).all():
            raise DataError(f"t must lie in [0, 1], got {t}")
        value = self.sigma_min * (self.sigma_max / self.sigma_min) ** t_arr
        return float(value) if np.ndim(value) == 0 else value

    def sigma_dot(self, t):
        """d sigma / dt = sigma(t) * ln(sigma_max / sigma_min)."""
        return self.sigma(t) * self.log_ratio

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> 'NoiseSchedule':
        return cls(float(doc.get('sigma_min', 0.01)), float(doc.get('sigma_max', 50.0)))


def perturb(layout: np.ndarray, t: float, z: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """P(t) = P(0) + sigma(t) * z."""
    layout = np.asarray(layout, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if layout.shape != z.shape:
        raise DataError(f"Noise shape {z.shape} does not match layout shape {layout.shape}")
    return layout + schedule.sigma(t) * z


def gaussian_score(x: np.ndarray, t: float, mu, sigma_data: float, schedule: NoiseSchedule) -> np.ndarray:
    """Exact score of N(mu, sigma_data^2 I) diffused to time t."""
    return (np.asarray(mu) - x) / (sigma_data ** 2 + schedule.sigma(t) ** 2)


LOSS_WEIGHTS = ('sigma2', 'one')


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 16
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    t_floor: float = 1e-3
    steps: int = 5000
    seed: int = 0
    loss_weight: str = 'sigma2'
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if not 0.0 < self.t_floor < 0.1:
            raise DataError(f"t_floor must lie in (0, 0.1), got {self.t_floor}")
        if self.steps < 1:
            raise DataError("steps must be >= 1")
        if self.loss_weight not in LOSS_WEIGHTS:
            raise DataError(f"loss_weight must be one of {LOSS_WEIGHTS}")


def loss_weight(sigma: np.ndarray, rule: str) -> np.ndarray:
    return sigma ** 2 if rule == 'sigma2' else np.ones_like(sigma)


def weighted_regression(output: np.ndarray, target: np.ndarray, weight: np.ndarray,
                        node_scene: np.ndarray, num_scenes: int) -> tuple[float, np.ndarray]:
    """
    Mean over scenes of weight_s * sum_nodes ||output - target||^2.

    Returns the loss and its gradient with respect to output.
    """
    diff = output - target
    per_scene = np.bincount(node_scene, weights=(diff ** 2).sum(axis=1), minlength=num_scenes)
    loss = float(np.mean(weight * per_scene))
    upstream = 2.0 * weight[node_scene][:, None] * diff / num_scenes
    return loss, upstream


def dsm_loss(params: ScoreNetParams, examples: Sequence[ArrangementExample], rng: np.random.Generator,
             schedule: NoiseSchedule, t_floor: float = 1e-3,
             weight_rule: str = 'sigma2') -> tuple[float, dict[str, np.ndarray]]:
    """
    Denoising score matching loss and exact parameter gradients.

    Draws t ~ U(t_floor, 1) per scene and z ~ N(0, I) per node; the
    regression target is (P(0) - P(t)) / sigma(t)^2. Gradient buffers are
    zeroed first, so the returned gradients belong to this batch only.
    """
    if not examples:
        raise DataError("dsm_loss needs a non-empty batch")
    t = rng.uniform(t_floor, 1.0, size=len(examples))
    sigma = schedule.sigma(t)
    clean = [ex.goal.array() for ex in examples]
    noise = [rng.standard_normal(p.shape) for p in clean]
    noisy = [perturb(p, tk, z, schedule) for p, tk, z in zip(clean, t, noise)]

    batch = GraphBatch.from_scenes(noisy, [ex.conditions for ex in examples], t, sigma)
    fp = forward(params, batch)
    scene = batch.node_scene
    target = (np.concatenate(clean) - batch.positions) / (sigma[scene] ** 2)[:, None]
    loss, upstream = weighted_regression(fp.output, target, loss_weight(sigma, weight_rule),
                                         scene, batch.num_scenes)
    if not math.isfinite(loss):
        raise NumericalError(f"Non-finite DSM loss (t = {np.array2string(t, precision=4)})",
                             detail='loss')
    params.zero_grad()
    grads = backward(params, fp, upstream)
    return loss, grads


SIGMA_DATA_FLOOR = 0.05
SIGMA_DATA_FALLBACK = 0.5


def estimate_sigma_data(dataset: Dataset) -> float:
    """
    Pooled per-category positional std of a dataset.

    Objects are grouped by label; each group is centered on its own mean and
    the squared deviations are pooled over both axes. Returns
    SIGMA_DATA_FALLBACK when no category occurs twice and never less than
    SIGMA_DATA_FLOOR.
    """
    by_label: dict[int, list[tuple[float, float]]] = {}
    for example in dataset.examples:
        for condition, position in zip(example.conditions, example.goal.positions):
            by_label.setdefault(condition.label, []).append(position)
    squares, dof = 0.0, 0
    for positions in by_label.values():
        if len(positions) < 2:
            continue
        arr = np.asarray(positions, dtype=np.float64)
        squares += float(((arr - arr.mean(axis=0)) ** 2).sum())
        dof += 2 * (len(positions) - 1)
    if dof == 0:
        return SIGMA_DATA_FALLBACK
    return max(math.sqrt(squares / dof), SIGMA_DATA_FLOOR)


class Adam:
    """Adam with bias correction over the named parameter arrays."""

    def __init__(self, params: ScoreNetParams, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(v) for name, v in params.values.items()}
        self.v = {name: np.zeros_like(v) for name, v in params.values.items()}

    def step(self, params: ScoreNetParams) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, value in params.values.items():
            g = params.grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            value -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


@dataclass
class TrainResult:
    params: ScoreNetParams
    schedule: NoiseSchedule
    losses: list[tuple[int, float]] = field(default_factory=list)
    checkpoint: Path | None = None


def _metadata(schedule: NoiseSchedule, cfg: TrainConfig, step: int, dataset: Dataset) -> dict:
    domains = sorted({ex.domain for ex in dataset.examples})
    return {
        'schedule': schedule.to_dict(),
        'train': asdict(cfg),
        'step': step,
        'domains': domains,
    }


def train(dataset: Dataset, cfg: TrainConfig, net_config: ScoreNetConfig | None = None,
          schedule: NoiseSchedule | None = None, checkpoint_path: Path | None = None,
          progress: bool = True) -> TrainResult:
    """
    Fit the score network to a dataset with seeded shuffling and Adam.

    A non-finite loss or a parameter update that leaves non-finite values
    aborts training. The last finite parameters are saved to checkpoint_path
    (when given) before the NumericalError propagates.

    Args:
        dataset: Training examples and their vocab.
        cfg: Optimizer and schedule settings.
        net_config: Network shape. By default the standard network with
            sigma_data from estimate_sigma_data(dataset).
        schedule: Noise schedule, NoiseSchedule() by default.
        checkpoint_path: Where periodic, final and last-good checkpoints go.
        progress: Show a tqdm progress bar.

    Returns:
        TrainResult with the trained parameters and the per-step losses.

    Raises:
        DataError: Empty dataset or a network config that does not fit its vocab.
        NumericalError: Training diverged.
    """
    if not len(dataset):
        raise DataError("Cannot train on an empty dataset")
    schedule = schedule or NoiseSchedule()
    if net_config is None:
        net_config = ScoreNetConfig(vocab_size=len(dataset.vocab), sigma_data=estimate_sigma_data(dataset),
                                    seed=cfg.seed)
    if net_config.vocab_size != len(dataset.vocab):
        raise DataError(
            f"Network expects {net_config.vocab_size} categories, dataset vocab has {len(dataset.vocab)}"
        )
    params = ScoreNetParams.initialize(net_config)
    optimizer = Adam(params, cfg.learning_rate, cfg.betas, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    logger.info("Training %d-parameter score network on %d examples for %d steps",
                params.count(), len(dataset), cfg.steps)

    result = TrainResult(params, schedule, checkpoint=checkpoint_path)
    order = rng.permutation(len(dataset))
    cursor = 0
    bar = tqdm(range(cfg.steps), desc='train', disable=not progress)
    for step in bar:
        indices = []
        while len(indices) < cfg.batch_size:
            if cursor == len(order):
                order = rng.permutation(len(dataset))
                cursor = 0
            take = min(cfg.batch_size - len(indices), len(order) - cursor)
            indices.extend(order[cursor:cursor + take])
            cursor += take
        batch = [dataset.examples[i] for i in indices]
        try:
            loss, _ = dsm_loss(params, batch, rng, schedule, cfg.t_floor, cfg.loss_weight)
        except NumericalError:
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, params, dataset.vocab,
                                _metadata(schedule, cfg, step, dataset))
                logger.error("Training diverged at step %d; last good parameters in %s", step, checkpoint_path)
            raise
        last_good = params.copy() if checkpoint_path is not None else None
        optimizer.step(params)
        if not params.all_finite():
            if last_good is not None:
                save_checkpoint(checkpoint_path, last_good, dataset.vocab,
                                _metadata(schedule, cfg, step, dataset))
                logger.error("Update at step %d produced non-finite parameters; last good parameters in %s",
                             step, checkpoint_path)
            raise NumericalError(f"Parameters became non-finite at step {step}", detail='update')
        result.losses.append((step, loss))
        if cfg.log_every and step % cfg.log_every == 0:
            bar.set_postfix(loss=f"{loss:.4f}")
            logger.debug("step %d loss %.6f", step, loss)
        if checkpoint_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, params, dataset.vocab,
                            _metadata(schedule, cfg, step + 1, dataset))

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, dataset.vocab,
                        _metadata(schedule, cfg, cfg.steps, dataset))
    logger.info("Final loss %.6f", result.losses[-1][1])
    return result


DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
# difference between the 5th and embedded 4th order weights
DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
PI_ALPHA = 0.7 / 5
PI_BETA = 0.4 / 5
MAX_REJECTED = 10 ** 6


def _rms_error(err, x, x_new, atol, rtol) -> float:
    scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
    return float(np.sqrt(np.mean((err / scale) ** 2))) if np.size(err) else 0.0


def rk45_integrate(rhs: Callable[[np.ndarray, float], np.ndarray], x0, t_start: float, t_end: float,
                   atol: float = 1e-5, rtol: float = 1e-5, h_min: float = 1e-6) -> np.ndarray:
    """
    Integrate dx/dt = rhs(x, t) from t_start to t_end (either direction).

    Adaptive Dormand-Prince 5(4) with local extrapolation, RMS error norm and
    a PI step-size controller (safety 0.9). Steps are clamped to
    [h_min, |t_end - t_start|]; more than 10^6 rejected steps raise
    NumericalError.

    Args:
        rhs: Vector field, called as rhs(x, t).
        x0: State at t_start.
        t_start: Initial time.
        t_end: Final time, before or after t_start.
        atol: Absolute tolerance.
        rtol: Relative tolerance.
        h_min: Smallest step.

    Returns:
        The state at t_end.

    Raises:
        DataError: Empty interval or non-positive tolerances.
        NumericalError: Non-finite state or step size underflow.
    """
    if t_start == t_end:
        raise DataError("t_start and t_end must differ")
    if atol <= 0 or rtol <= 0:
        raise DataError("Tolerances must be positive")
    x = np.array(x0, dtype=np.float64)
    direction = 1.0 if t_end > t_start else -1.0
    span = abs(t_end - t_start)
    h_max = span
    h_min = min(h_min, span)

    t = t_start
    k1 = np.asarray(rhs(x, t), dtype=np.float64)
    scale = atol + rtol * np.abs(x)
    d0 = float(np.sqrt(np.mean((x / scale) ** 2))) if x.size else 0.0
    d1 = float(np.sqrt(np.mean((k1 / scale) ** 2))) if x.size else 0.0
    h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
    h = min(max(h, h_min), h_max)

    err_prev = 1e-4
    accepted = rejected = evaluations = 0
    while direction * (t_end - t) > 0:
        remaining = abs(t_end - t)
        last = h >= remaining
        if last:
            h = remaining
        dt = direction * h
        stages = [k1]
        for i in range(1, 7):
            increment = sum(a * k for a, k in zip(DP_A[i], stages) if a)
            stages.append(np.asarray(rhs(x + dt * increment, t + DP_C[i] * dt), dtype=np.float64))
        evaluations += 6
        x_new = x + dt * sum(b * k for b, k in zip(DP_B, stages) if b)
        err_vec = dt * sum(e * k for e, k in zip(DP_E, stages) if e)
        err = _rms_error(err_vec, x, x_new, atol, rtol)
        if not math.isfinite(err):
            raise NumericalError(f"Non-finite state at t = {t:.6g}", detail='rk45')

        if err <= 1.0:
            t = t_end if last else t + dt
            x = x_new
            k1 = stages[6]
            accepted += 1
            if err == 0.0:
                factor = MAX_FACTOR
            else:
                factor = SAFETY * err ** -PI_ALPHA * err_prev ** PI_BETA
            factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
            err_prev = max(err, 1e-4)
            h = min(max(h * factor, h_min), h_max)
        else:
            rejected += 1
            if rejected > MAX_REJECTED:
                raise NumericalError(f"Step size underflow near t = {t:.6g}", detail='rk45')
            factor = max(MIN_FACTOR, SAFETY * err ** -0.2)
            h = max(h * factor, h_min)

    logger.debug("rk45: %d accepted, %d rejected, %d evaluations", accepted, rejected, evaluations)
    return x


@dataclass(frozen=True)
class SamplerConfig:
    method: str = 'rk45'
    atol: float = 1e-5
    rtol: float = 1e-5
    euler_steps: int = 500
    t_floor: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.method not in ('rk45', 'euler'):
            raise DataError(f"Unknown sampler method '{self.method}'")
        if self.atol <= 0 or self.rtol <= 0:
            raise DataError("Sampler tolerances must be positive")
        if self.euler_steps < 1:
            raise DataError("euler_steps must be >= 1")
        if not 0.0 < self.t_floor < 0.1:
            raise DataError(f"t_floor must lie in (0, 0.1), got {self.t_floor}")


def integrate_pf_ode(score_fn: Callable[[np.ndarray, float], np.ndarray], x1: np.ndarray,
                     schedule: NoiseSchedule, cfg: SamplerConfig) -> np.ndarray:
    """
    Solve dP/dt = -sigma(t) sigma'(t) score(P, t) from t = 1 to t = t_floor.
    """
    def rhs(x, t):
        return -schedule.sigma(t) * schedule.sigma_dot(t) * score_fn(x, t)

    if cfg.method == 'rk45':
        return rk45_integrate(rhs, x1, 1.0, cfg.t_floor, cfg.atol, cfg.rtol)
    x = np.array(x1, dtype=np.float64)
    dt = (cfg.t_floor - 1.0) / cfg.euler_steps
    for k in range(cfg.euler_steps):
        x = x + dt * rhs(x, 1.0 + k * dt)
    if not np.isfinite(x).all():
        raise NumericalError("Euler sampler produced non-finite positions", detail='euler')
    return x


def align_identical(conditions: Sequence[ObjectCondition], layout: Layout) -> Layout:
    """
    Within every group of identical conditions, hand out positions in order
    of ascending x. Objects with identical conditions are interchangeable,
    so this only fixes the canonical order.
    """
    positions = list(layout.positions)
    groups: dict[ObjectCondition, list[int]] = {}
    for i, c in enumerate(conditions):
        groups.setdefault(c, []).append(i)
    for members in groups.values():
        if len(members) > 1:
            ordered = sorted((positions[i] for i in members), key=lambda p: p[0])
            for i, p in zip(members, ordered):
                positions[i] = p
    return Layout(tuple(positions))


def schedule_of(checkpoint: Checkpoint) -> NoiseSchedule:
    return NoiseSchedule.from_dict(checkpoint.metadata.get('schedule', {}))


def sample(checkpoint: Checkpoint, conditions: Sequence[ObjectCondition], cfg: SamplerConfig,
           num_samples: int = 1) -> list[Layout]:
    """
    Draw goal layouts for one scene's conditions with the PF-ODE.

    Sample k starts from P(1) ~ N(0, sigma_max^2 I) drawn from the RNG
    stream (seed, k); all samples are integrated together as one batch.

    Args:
        checkpoint: Trained network, vocab and noise schedule.
        conditions: Sizes and labels of the objects to place.
        cfg: Solver choice, tolerances and seed.
        num_samples: Layouts to draw.

    Returns:
        num_samples layouts with identical objects ordered by x.

    Raises:
        DataError: No conditions, or a label the network does not know.
        NumericalError: The network or the solver produced non-finite values.
    """
    if not conditions:
        raise DataError("Cannot sample a layout for zero objects")
    if num_samples < 1:
        raise DataError("num_samples must be >= 1")
    params = checkpoint.params
    for c in conditions:
        if c.label >= params.config.vocab_size:
            raise DataError(f"Label {c.label} outside checkpoint vocab '{checkpoint.vocab.name}'")
    schedule = schedule_of(checkpoint)
    n = len(conditions)
    starts = [np.random.default_rng([cfg.seed, k]).standard_normal((n, 2)) * schedule.sigma_max
              for k in range(num_samples)]
    template = GraphBatch.from_scenes(starts, [tuple(conditions)] * num_samples,
                                      np.ones(num_samples), np.full(num_samples, schedule.sigma_max))

    def score_fn(x, t):
        batch = template.with_positions(x, np.full(num_samples, t), np.full(num_samples, schedule.sigma(t)))
        return forward(params, batch).output

    final = integrate_pf_ode(score_fn, template.positions, schedule, cfg)
    layouts = []
    for k in range(num_samples):
        layout = Layout.from_array(final[k * n:(k + 1) * n])
        layouts.append(align_identical(conditions, layout))
    return layouts


def sample_dataset(checkpoint: Checkpoint, reference: Dataset, cfg: SamplerConfig,
                   samples_per_scene: int = 1, progress: bool = False) -> Dataset:
    """Sample goals for the conditions of every scene in a dataset."""
    examples = []
    for index, ex in enumerate(tqdm(reference.examples, desc='sample', disable=not progress)):
        scene_cfg = SamplerConfig(cfg.method, cfg.atol, cfg.rtol, cfg.euler_steps, cfg.t_floor,
                                  int(np.random.SeedSequence([cfg.seed, index]).generate_state(1)[0]))
        for layout in sample(checkpoint, ex.conditions, scene_cfg, samples_per_scene):
            examples.append(ArrangementExample(ex.conditions, layout, ex.domain).canonical())
    return Dataset(tuple(examples), reference.vocab, reference.normalization)
