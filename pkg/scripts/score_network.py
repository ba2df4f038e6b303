#!/usr/bin/env python3
"""
Conditional score network over fully connected object graphs.

Every object of a scene is a node carrying its (scaled) position, its
bounding-box size and a one-hot category label. A two-layer node encoder
feeds two EdgeConv layers,

    h_i' = h_i + act( max_{j != i} MLP([h_i, h_j - h_i]) ),

after which a Gaussian Fourier time embedding (projected by one dense layer)
is concatenated onto every node and a two-layer head produces a raw 2D
output F per node. Inputs and outputs are preconditioned on the noise level:
positions enter scaled by c_in = 1 / sqrt(sigma_data^2 + sigma^2), every node
also sees c_noise = ln(sigma) / 4, and the denoised estimate

    D = c_skip * x + c_out * F,   c_skip = sigma_data^2 / (sigma^2 + sigma_data^2),
                                  c_out = sigma * sigma_data / sqrt(sigma^2 + sigma_data^2)

turns into the score (D - x) / sigma^2.

Gradients are computed by hand: forward() keeps the intermediate arrays it
needs and backward() walks them in reverse, accumulating parameter gradients
into the caller's ScoreNetParams.grads. All arithmetic is float64.

Checkpoint format (little endian):

    b"LPCK" | u32 version | u32 header length | JSON header | float64 arrays

The header holds the network config, the vocab and its hash, the name and
shape of every stored array, and free-form metadata (noise schedule,
training step).
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from layout_model import CategoryVocab, DataError, NumericalError, ObjectCondition

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'LPCK'
CHECKPOINT_VERSION = 2


def _silu(x):
    return x * expit(x)


def _silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (x > 0.0).astype(np.float64)


ACTIVATIONS = {
    'silu': (_silu, _silu_grad),
    'relu': (_relu, _relu_grad),
}


@dataclass(frozen=True)
class ScoreNetConfig:
    vocab_size: int
    hidden_width: int = 128
    embed_dim: int = 64
    activation: str = 'silu'
    aggregation: str = 'max'
    fourier_scale: float = 16.0
    sigma_data: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise DataError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.hidden_width < 8 or self.embed_dim < 8:
            raise DataError("hidden_width and embed_dim must be >= 8")
        if self.embed_dim % 2:
            raise DataError(f"embed_dim must be even, got {self.embed_dim}")
        if self.activation not in ACTIVATIONS:
            raise DataError(f"Unknown activation '{self.activation}'")
        if self.aggregation not in ('max', 'mean'):
            raise DataError(f"Unknown aggregation '{self.aggregation}'")
        if self.sigma_data <= 0:
            raise DataError("sigma_data must be positive")

    @property
    def node_dim(self) -> int:
        # position, size, noise level, one-hot label
        return 5 + self.vocab_size


def layer_shapes(config: ScoreNetConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every trainable array, in storage order."""
    h, e, d = config.hidden_width, config.embed_dim, config.node_dim
    dense = [
        ('encoder.0', d, h), ('encoder.1', h, h),
        ('conv1.0', 2 * h, h), ('conv1.1', h, h), ('conv1.2', h, h),
        ('conv2.0', 2 * h, h), ('conv2.1', h, h), ('conv2.2', h, h),
        ('time', e, e),
        ('head.0', h + e, h), ('head.1', h, 2),
    ]
    shapes = {}
    for name, fan_in, fan_out in dense:
        shapes[f'{name}.weight'] = (fan_in, fan_out)
        shapes[f'{name}.bias'] = (fan_out,)
    return shapes


class ScoreNetParams:
    """Named float64 arrays plus same-shaped gradient buffers."""

    def __init__(self, config: ScoreNetConfig, values: dict[str, np.ndarray], freqs: np.ndarray):
        self.config = config
        self.values = values
        self.freqs = freqs
        self.grads = {name: np.zeros_like(v) for name, v in values.items()}

    @classmethod
    def initialize(cls, config: ScoreNetConfig) -> 'ScoreNetParams':
        rng = np.random.default_rng(config.seed)
        shapes = layer_shapes(config)
        values = {}
        for name, shape in shapes.items():
            layer = name.rsplit('.', 1)[0]
            bound = 1.0 / np.sqrt(shapes[f'{layer}.weight'][0])
            values[name] = rng.uniform(-bound, bound, size=shape)
        freqs = rng.normal(0.0, 1.0, size=config.embed_dim // 2) * config.fourier_scale
        return cls(config, values, freqs)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def count(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def copy(self) -> 'ScoreNetParams':
        return ScoreNetParams(self.config, {k: v.copy() for k, v in self.values.items()}, self.freqs.copy())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.values.values())


@dataclass(frozen=True)
class _Edges:
    src: np.ndarray       # node receiving the message (i)
    dst: np.ndarray       # neighbour (j)
    starts: np.ndarray    # first edge of every node that has neighbours
    degree: np.ndarray    # neighbours per node
    has_edges: np.ndarray


@dataclass(frozen=True)
class GraphBatch:
    """
    Several scenes stacked node-wise; scene k owns nodes offsets[k]:offsets[k+1].
    """

    positions: np.ndarray   # (N, 2)
    sizes: np.ndarray       # (N, 2)
    labels: np.ndarray      # (N,)
    offsets: np.ndarray     # (S + 1,)
    t: np.ndarray           # (S,)
    sigma: np.ndarray       # (S,)

    @classmethod
    def from_scenes(cls, positions: Sequence[np.ndarray], conditions: Sequence[Sequence[ObjectCondition]],
                    t: Sequence[float], sigma: Sequence[float]) -> 'GraphBatch':
        if not (len(positions) == len(conditions) == len(t) == len(sigma)):
            raise DataError("positions, conditions, t and sigma must describe the same scenes")
        counts = [len(c) for c in conditions]
        for pos, n in zip(positions, counts):
            if np.shape(pos) != (n, 2):
                raise DataError(f"Scene positions of shape {np.shape(pos)} do not match {n} objects")
        return cls(
            positions=np.concatenate([np.asarray(p, dtype=np.float64) for p in positions]).reshape(-1, 2),
            sizes=np.array([c.size for scene in conditions for c in scene], dtype=np.float64).reshape(-1, 2),
            labels=np.array([c.label for scene in conditions for c in scene], dtype=np.int64),
            offsets=np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
            t=np.asarray(t, dtype=np.float64),
            sigma=np.asarray(sigma, dtype=np.float64),
        )

    def with_positions(self, positions: np.ndarray, t=None, sigma=None) -> 'GraphBatch':
        return GraphBatch(
            np.asarray(positions, dtype=np.float64).reshape(-1, 2), self.sizes, self.labels, self.offsets,
            self.t if t is None else np.asarray(t, dtype=np.float64),
            self.sigma if sigma is None else np.asarray(sigma, dtype=np.float64),
        )

    @property
    def num_nodes(self) -> int:
        return int(self.offsets[-1])

    @property
    def num_scenes(self) -> int:
        return len(self.offsets) - 1

    @cached_property
    def node_scene(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_scenes), np.diff(self.offsets))

    @cached_property
    def edges(self) -> _Edges:
        src, dst = [], []
        for k in range(self.num_scenes):
            start, n = int(self.offsets[k]), int(self.offsets[k + 1] - self.offsets[k])
            ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing='ij')
            mask = ii != jj
            src.append(ii[mask] + start)
            dst.append(jj[mask] + start)
        src = np.concatenate(src).astype(np.int64) if src else np.zeros(0, np.int64)
        dst = np.concatenate(dst).astype(np.int64) if dst else np.zeros(0, np.int64)
        degree = np.bincount(src, minlength=self.num_nodes)
        has_edges = degree > 0
        first = np.concatenate([[0], np.cumsum(degree)[:-1]])
        return _Edges(src, dst, first[has_edges], degree, has_edges)

    def validate(self, config: ScoreNetConfig) -> None:
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= config.vocab_size):
            raise DataError(f"Labels outside vocab of size {config.vocab_size}")
        if np.any(self.t < 0) or not np.isfinite(self.t).all():
            raise DataError("Time values must be finite and non-negative")
        if np.any(self.sigma <= 0):
            raise DataError("sigma must be positive")
        if not np.isfinite(self.positions).all():
            raise NumericalError("Non-finite positions in graph batch", detail='input')


def time_embed(t, freqs: np.ndarray) -> np.ndarray:
    """
    Gaussian Fourier features [sin(2 pi f t), cos(2 pi f t)].

    Accepts a scalar (returns a vector) or an array of times (returns rows).
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if not np.isfinite(t_arr).all() or np.any(t_arr < 0):
        raise DataError(f"Time must be finite and non-negative, got {t}")
    proj = 2.0 * np.pi * t_arr[..., None] * freqs
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)


def preconditioning(sigma, sigma_data: float):
    """Per-scene (c_in, c_skip, c_out, c_noise) for noise levels sigma."""
    sigma = np.asarray(sigma, dtype=np.float64)
    total = sigma ** 2 + sigma_data ** 2
    c_in = 1.0 / np.sqrt(total)
    c_skip = sigma_data ** 2 / total
    c_out = sigma * sigma_data / np.sqrt(total)
    c_noise = np.log(sigma) / 4.0
    return c_in, c_skip, c_out, c_noise


def _check_finite(name: str, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise NumericalError(f"Non-finite activation in layer '{name}'", detail=name)


def _linear(params: ScoreNetParams, name: str, x: np.ndarray) -> np.ndarray:
    return x @ params.values[f'{name}.weight'] + params.values[f'{name}.bias']


def _linear_backward(params: ScoreNetParams, name: str, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    params.grads[f'{name}.weight'] += x.T @ dy
    params.grads[f'{name}.bias'] += dy.sum(axis=0)
    return dy @ params.values[f'{name}.weight'].T


def segment_max(messages: np.ndarray, edges: _Edges, num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Per-node, per-feature max over incoming messages.

    Returns the aggregate (zero rows for nodes without neighbours) and the
    winning edge index for every (node with neighbours, feature); ties go to
    the lowest edge index, i.e. the lowest neighbour index.
    """
    width = messages.shape[1]
    agg = np.zeros((num_nodes, width))
    if messages.shape[0] == 0:
        return agg, np.zeros((0, width), dtype=np.int64)
    reduced = np.maximum.reduceat(messages, edges.starts, axis=0)
    counts = edges.degree[edges.has_edges]
    winners = messages == np.repeat(reduced, counts, axis=0)
    positions = np.where(winners, np.arange(messages.shape[0])[:, None], messages.shape[0])
    argpos = np.minimum.reduceat(positions, edges.starts, axis=0)
    agg[edges.has_edges] = reduced
    return agg, argpos


def _aggregate(messages, edges, num_nodes, mode):
    if mode == 'max':
        return segment_max(messages, edges, num_nodes)
    agg = np.zeros((num_nodes, messages.shape[1]))
    if messages.shape[0]:
        sums = np.add.reduceat(messages, edges.starts, axis=0)
        agg[edges.has_edges] = sums / edges.degree[edges.has_edges][:, None]
    return agg, None


def _aggregate_backward(dagg, argpos, edges, num_edges, mode):
    dm = np.zeros((num_edges, dagg.shape[1]))
    if num_edges == 0:
        return dm
    if mode == 'max':
        dm[argpos, np.arange(dagg.shape[1])[None, :]] = dagg[edges.has_edges]
    else:
        dm = dagg[edges.src] / edges.degree[edges.src][:, None]
    return dm


@dataclass
class ForwardPass:
    """Output of forward() plus everything backward() needs."""

    output: np.ndarray
    batch: GraphBatch
    cache: dict


def _edge_conv(params, name, h, batch, act, cache):
    edges = batch.edges
    hi = h[edges.src]
    u = np.concatenate([hi, h[edges.dst] - hi], axis=1)
    q1 = _linear(params, f'{name}.0', u)
    r1 = act(q1)
    q2 = _linear(params, f'{name}.1', r1)
    r2 = act(q2)
    m = _linear(params, f'{name}.2', r2)
    agg, argpos = _aggregate(m, edges, batch.num_nodes, params.config.aggregation)
    out = h + act(agg)
    _check_finite(name, out)
    cache[name] = (h, u, q1, r1, q2, r2, agg, argpos)
    return out


def forward(params: ScoreNetParams, batch: GraphBatch) -> ForwardPass:
    """
    Score estimates, one 2D row per node. Permutation equivariant within scenes.

    Args:
        params: Network parameters.
        batch: Scenes to score, with their diffusion times and noise levels.

    Returns:
        ForwardPass whose output has shape (num_nodes, 2).

    Raises:
        DataError: The batch does not match the network config.
        NumericalError: A layer produced a non-finite activation; detail names it.
    """
    config = params.config
    batch.validate(config)
    act, _ = ACTIVATIONS[config.activation]
    scene = batch.node_scene
    cache = {}

    c_in, c_skip, c_out, c_noise = preconditioning(batch.sigma, config.sigma_data)
    onehot = np.eye(config.vocab_size)[batch.labels]
    x0 = np.concatenate([batch.positions * c_in[scene][:, None], batch.sizes,
                         c_noise[scene][:, None], onehot], axis=1)

    z1 = _linear(params, 'encoder.0', x0)
    a1 = act(z1)
    z2 = _linear(params, 'encoder.1', a1)
    h0 = act(z2)
    _check_finite('encoder', h0)
    cache['encoder'] = (x0, z1, a1, z2)

    h1 = _edge_conv(params, 'conv1', h0, batch, act, cache)
    h2 = _edge_conv(params, 'conv2', h1, batch, act, cache)

    fourier = time_embed(batch.t, params.freqs)
    tz = _linear(params, 'time', fourier)
    temb = act(tz)
    _check_finite('time', temb)
    cache['time'] = (fourier, tz)

    features = np.concatenate([h2, temb[scene]], axis=1)
    y1 = _linear(params, 'head.0', features)
    g1 = act(y1)
    raw = _linear(params, 'head.1', g1)
    sigma2 = batch.sigma[scene][:, None] ** 2
    denoised = c_skip[scene][:, None] * batch.positions + c_out[scene][:, None] * raw
    out = (denoised - batch.positions) / sigma2
    _check_finite('head', out)
    cache['head'] = (features, y1, g1)
    return ForwardPass(out, batch, cache)


def _edge_conv_backward(params, name, dout, batch, act_grad, cache):
    h, u, q1, r1, q2, r2, agg, argpos = cache[name]
    edges = batch.edges
    dagg = dout * act_grad(agg)
    dm = _aggregate_backward(dagg, argpos, edges, u.shape[0], params.config.aggregation)
    dr2 = _linear_backward(params, f'{name}.2', r2, dm)
    dq2 = dr2 * act_grad(q2)
    dr1 = _linear_backward(params, f'{name}.1', r1, dq2)
    dq1 = dr1 * act_grad(q1)
    du = _linear_backward(params, f'{name}.0', u, dq1)
    width = h.shape[1]
    dself, dneighbour = du[:, :width], du[:, width:]
    dh = dout.copy()
    np.add.at(dh, edges.src, dself - dneighbour)
    np.add.at(dh, edges.dst, dneighbour)
    return dh


def backward(params: ScoreNetParams, fp: ForwardPass, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """
    Accumulate d(loss)/d(params) into params.grads given d(loss)/d(output).

    Callers zero the buffers between steps.

    Args:
        params: The parameters forward() ran with.
        fp: Result of forward().
        upstream: d(loss)/d(output), same shape as fp.output.

    Returns:
        params.grads.

    Raises:
        DataError: upstream has the wrong shape.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != fp.output.shape:
        raise DataError(f"Upstream gradient shape {upstream.shape} != output shape {fp.output.shape}")
    _, act_grad = ACTIVATIONS[params.config.activation]
    batch = fp.batch
    scene = batch.node_scene
    hidden = params.config.hidden_width

    _, _, c_out, _ = preconditioning(batch.sigma, params.config.sigma_data)
    draw = upstream * (c_out / batch.sigma ** 2)[scene][:, None]
    features, y1, g1 = fp.cache['head']
    dg1 = _linear_backward(params, 'head.1', g1, draw)
    dy1 = dg1 * act_grad(y1)
    dfeatures = _linear_backward(params, 'head.0', features, dy1)
    dh2 = dfeatures[:, :hidden]

    dtemb = np.zeros((batch.num_scenes, params.config.embed_dim))
    np.add.at(dtemb, scene, dfeatures[:, hidden:])
    fourier, tz = fp.cache['time']
    _linear_backward(params, 'time', fourier, dtemb * act_grad(tz))

    dh1 = _edge_conv_backward(params, 'conv2', dh2, batch, act_grad, fp.cache)
    dh0 = _edge_conv_backward(params, 'conv1', dh1, batch, act_grad, fp.cache)

    x0, z1, a1, z2 = fp.cache['encoder']
    dz2 = dh0 * act_grad(z2)
    da1 = _linear_backward(params, 'encoder.1', a1, dz2)
    _linear_backward(params, 'encoder.0', x0, da1 * act_grad(z1))
    return params.grads


@dataclass
class Checkpoint:
    params: ScoreNetParams
    vocab: CategoryVocab
    metadata: dict


def save_checkpoint(path: Path, params: ScoreNetParams, vocab: CategoryVocab,
                    metadata: dict | None = None) -> None:
    """Write parameters with a versioned JSON header."""
    if len(vocab) != params.config.vocab_size:
        raise DataError(f"Vocab '{vocab.name}' has {len(vocab)} categories, network expects {params.config.vocab_size}")
    arrays = list(params.values.items()) + [('time.freqs', params.freqs)]
    header = {
        'config': asdict(params.config),
        'vocab': vocab.to_dict(),
        'vocab_hash': vocab.digest(),
        'arrays': [{'name': name, 'shape': list(a.shape)} for name, a in arrays],
        'metadata': metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + '.tmp')
    with open(tmp, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype='<f8').tobytes())
    tmp.replace(path)
    logger.debug("Saved checkpoint %s", path)


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint, validating array shapes against its config and vocab."""
    path = Path(path)
    if not path.exists():
        raise DataError("Checkpoint not found", path=path)
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError("Not a layoutprior checkpoint (bad magic)", path=path)
    version, header_len = struct.unpack('<II', data[4:12])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"Unsupported checkpoint version {version}", path=path)
    try:
        header = json.loads(data[12:12 + header_len].decode('utf-8'))
        config = ScoreNetConfig(**header['config'])
        vocab = CategoryVocab.from_dict(header['vocab'])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"Corrupt checkpoint header: {e}", path=path) from e
    if vocab.digest() != header.get('vocab_hash'):
        raise DataError("Checkpoint vocab does not match its recorded hash", path=path)
    if len(vocab) != config.vocab_size:
        raise DataError("Checkpoint vocab size does not match network config", path=path)

    expected = dict(layer_shapes(config))
    expected['time.freqs'] = (config.embed_dim // 2,)
    offset = 12 + header_len
    arrays = {}
    for entry in header['arrays']:
        name, shape = entry['name'], tuple(entry['shape'])
        if expected.get(name) != shape:
            raise DataError(f"Array '{name}' has shape {shape}, config expects {expected.get(name)}", path=path)
        size = int(np.prod(shape)) * 8
        if offset + size > len(data):
            raise DataError("Checkpoint truncated", path=path)
        arrays[name] = np.frombuffer(data, dtype='<f8', count=size // 8, offset=offset).astype(np.float64).reshape(shape)
        offset += size
    missing = set(expected) - set(arrays)
    if missing:
        raise DataError(f"Checkpoint missing arrays: {', '.join(sorted(missing))}", path=path)
    freqs = arrays.pop('time.freqs')
    params = ScoreNetParams(config, arrays, freqs)
    return Checkpoint(params, vocab, header.get('metadata', {}))
