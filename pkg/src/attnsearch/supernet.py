"""A residual vector network whose blocks can be wired to a gating module.

Each block computes ``f = F(x)`` (two dense layers, relu hidden) and then

    x <- x + f                    if the block is disconnected
    x <- x + M(f) * f             if connected, M(f) = sigmoid(W2 relu(W1 f))

``M`` is one module per stage (``share_full``) or one per block
(``org_full``). Stages may change width; a linear projection sits in
front of every stage after the first, and a linear head produces class
scores trained with softmax cross-entropy.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .scheme import ConnectionScheme, sample_bernoulli

SHARING_MODES = ("share_full", "org_full")


@dataclass(frozen=True)
class SupernetConfig:
    stage_sizes: tuple[int, ...] = (6, 6, 6)
    stage_widths: tuple[int, ...] = (16, 32, 64)
    block_hidden: int = 4
    attn_bottleneck: int = 8
    sharing_mode: str = "share_full"
    input_dim: int = 16
    n_classes: int = 8
    data_seed: int = 0
    batch_size: int = 64
    learning_rate: float = 1e-3
    pretrain_steps: int = 2000
    scratch_steps: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "stage_sizes", tuple(int(s) for s in self.stage_sizes))
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if len(self.stage_sizes) != len(self.stage_widths) or not self.stage_sizes:
            raise ValueError("stage_sizes and stage_widths must be non-empty and equally long")
        if any(s <= 0 for s in self.stage_sizes) or any(w <= 0 for w in self.stage_widths):
            raise ValueError("stage sizes and widths must be positive")
        for name in ("block_hidden", "attn_bottleneck", "input_dim", "n_classes", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sharing_mode not in SHARING_MODES:
            raise ValueError(f"sharing_mode must be one of {SHARING_MODES}")
        if self.pretrain_steps < 1 or self.scratch_steps < 1:
            raise ValueError("step budgets must be >= 1")

    @property
    def m(self):
        return sum(self.stage_sizes)

    def block_stage(self):
        return [k for k, n in enumerate(self.stage_sizes) for _ in range(n)]


# -- data -------------------------------------------------------------------

@dataclass
class ToyDataset:
    """Gaussian-mixture classification with several clusters per class."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    seed: int

    @property
    def input_dim(self):
        return self.x_train.shape[1]


def make_dataset(seed=0, input_dim=16, n_classes=8, n_train=4096, n_val=1024, n_test=1024,
                 clusters_per_class=4, spread=0.8, cov_rank=0, cov_scale=0.0):
    """Sample a labelled mixture; each class owns ``clusters_per_class`` Gaussians.

    With ``cov_rank > 0`` every class also stretches its noise along
    ``cov_rank`` random directions by ``cov_scale``, so that classes differ
    in shape as well as location.
    """
    rng = np.random.default_rng(seed)
    n_total = n_train + n_val + n_test
    centers = rng.normal(0.0, spread, size=(n_classes, clusters_per_class, input_dim))
    y = rng.integers(0, n_classes, size=n_total)
    which = rng.integers(0, clusters_per_class, size=n_total)
    x = centers[y, which] + rng.normal(0.0, 1.0, size=(n_total, input_dim))
    if cov_rank:
        dirs = rng.normal(size=(n_classes, cov_rank, input_dim)) / np.sqrt(input_dim)
        coef = rng.normal(0.0, cov_scale, size=(n_total, cov_rank))
        x += np.einsum("nr,nrd->nd", coef, dirs[y])
    a, b = n_train, n_train + n_val
    return ToyDataset(x[:a], y[:a], x[a:b], y[a:b], x[b:], y[b:], n_classes, seed)


# -- network ----------------------------------------------------------------

@dataclass
class Supernet:
    config: SupernetConfig
    stem: nn.MlpParams
    projections: list[nn.MlpParams]
    blocks: list[nn.MlpParams]
    attention: list[nn.MlpParams]
    head: nn.MlpParams
    attn_index: list[int] = field(default_factory=list)

    def attention_for(self, block):
        return self.attention[self.attn_index[block]]

    def named_params(self):
        out = [("stem", self.stem)]
        out += [(f"proj{k + 1}", p) for k, p in enumerate(self.projections)]
        out += [(f"block{i}", p) for i, p in enumerate(self.blocks)]
        out += [(f"attn{j}", p) for j, p in enumerate(self.attention)]
        out.append(("head", self.head))
        return out

    def attention_parameter_count(self):
        return sum(p.num_parameters() for p in self.attention)

    def num_parameters(self):
        return sum(p.num_parameters() for _, p in self.named_params())

    def copy(self):
        return Supernet(
            self.config, self.stem.copy(), [p.copy() for p in self.projections],
            [p.copy() for p in self.blocks], [p.copy() for p in self.attention],
            self.head.copy(), list(self.attn_index),
        )

    def bitwise_equal(self, other):
        mine, theirs = self.named_params(), other.named_params()
        return len(mine) == len(theirs) and all(
            a[0] == b[0] and a[1].bitwise_equal(b[1]) for a, b in zip(mine, theirs)
        )


def build_supernet(config, rng):
    widths = config.stage_widths
    stem = nn.init_mlp([config.input_dim, widths[0]], ["identity"], rng)
    projections = [
        nn.init_mlp([widths[k - 1], widths[k]], ["identity"], rng) for k in range(1, len(widths))
    ]
    stage = config.block_stage()
    blocks = [
        nn.init_mlp([widths[k], config.block_hidden, widths[k]], ["relu", "identity"], rng)
        for k in stage
    ]

    def attn(width):
        return nn.init_mlp([width, config.attn_bottleneck, width], ["relu", "sigmoid"], rng)

    if config.sharing_mode == "share_full":
        attention = [attn(w) for w in widths]
        attn_index = list(stage)
    else:
        attention = [attn(widths[k]) for k in stage]
        attn_index = list(range(config.m))
    head = nn.init_mlp([widths[-1], config.n_classes], ["identity"], rng)
    return Supernet(config, stem, projections, blocks, attention, head, attn_index)


def _scheme_bits(net, scheme):
    bits = scheme.bits if isinstance(scheme, ConnectionScheme) else tuple(int(b) for b in scheme)
    if len(bits) != net.config.m:
        raise nn.ShapeError(f"scheme has {len(bits)} bits, supernet has {net.config.m} blocks")
    return bits


def _forward_train(net, bits, x):
    """Forward pass that records everything backprop needs."""
    stage = net.config.block_stage()
    h, stem_cache = nn.forward_cache(net.stem, x)
    trace = []
    for i, block in enumerate(net.blocks):
        k = stage[i]
        proj_cache = None
        if i > 0 and stage[i - 1] != k:
            h, proj_cache = nn.forward_cache(net.projections[k - 1], h)
        f, f_cache = nn.forward_cache(block, h)
        if bits[i]:
            mask, m_cache = nn.forward_cache(net.attention_for(i), f)
            h = h + mask * f
        else:
            mask = m_cache = None
            h = h + f
        trace.append((proj_cache, f, f_cache, mask, m_cache))
    logits, head_cache = nn.forward_cache(net.head, h)
    return logits, (stem_cache, trace, head_cache)


def forward(net, scheme, x):
    """Class scores for a batch (or single vector) under connection ``scheme``."""
    bits = _scheme_bits(net, scheme)
    x = np.asarray(x, dtype=np.float64)
    stage = net.config.block_stage()
    h = nn.mlp_forward(net.stem, x)
    for i, block in enumerate(net.blocks):
        k = stage[i]
        if i > 0 and stage[i - 1] != k:
            h = nn.mlp_forward(net.projections[k - 1], h)
        f = nn.mlp_forward(block, h)
        if bits[i]:
            h = h + nn.mlp_forward(net.attention_for(i), f) * f
        else:
            h = h + f
    return nn.mlp_forward(net.head, h)


def block_activations(net, scheme, x):
    """Inputs to every block plus the final features, for inspection."""
    bits = _scheme_bits(net, scheme)
    stage = net.config.block_stage()
    h = nn.mlp_forward(net.stem, np.asarray(x, dtype=np.float64))
    acts = []
    for i, block in enumerate(net.blocks):
        if i > 0 and stage[i - 1] != stage[i]:
            h = nn.mlp_forward(net.projections[stage[i] - 1], h)
        acts.append(h)
        f = nn.mlp_forward(block, h)
        h = h + nn.mlp_forward(net.attention_for(i), f) * f if bits[i] else h + f
    acts.append(h)
    return acts


def softmax_xent(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return float(loss), grad / n


def loss_and_grads(net, scheme, x, y):
    """Mean cross-entropy and a name -> GradientBundle map.

    Attention modules that no connected block uses get no entry.
    """
    bits = _scheme_bits(net, scheme)
    stage = net.config.block_stage()
    logits, (stem_cache, trace, head_cache) = _forward_train(net, bits, x)
    loss, dlogits = softmax_xent(logits, y)
    grads = {}
    g, delta = nn.backward_cache(net.head, head_cache, dlogits)
    grads["head"] = g
    for i in range(len(net.blocks) - 1, -1, -1):
        proj_cache, f, f_cache, mask, m_cache = trace[i]
        if bits[i]:
            j = net.attn_index[i]
            g_attn, d_f_via_mask = nn.backward_cache(net.attention[j], m_cache, delta * f)
            key = f"attn{j}"
            if key in grads:
                for acc, part in zip(grads[key].arrays(), g_attn.arrays()):
                    acc += part
            else:
                grads[key] = g_attn
            d_f = delta * mask + d_f_via_mask
        else:
            d_f = delta
        g_block, d_h = nn.backward_cache(net.blocks[i], f_cache, d_f)
        grads[f"block{i}"] = g_block
        delta = delta + d_h
        if proj_cache is not None:
            k = stage[i]
            g_proj, delta = nn.backward_cache(net.projections[k - 1], proj_cache, delta)
            grads[f"proj{k}"] = g_proj
    grads["stem"] = nn.backward_cache(net.stem, stem_cache, delta)[0]
    return loss, grads


class Trainer:
    """Adam over all supernet parameters at once.

    The parameter arrays of ``net`` are rebound to views of one flat
    buffer so a step is a handful of vector operations. Modules that got no
    gradient this step see a zero gradient.
    """

    def __init__(self, net, learning_rate=1e-3):
        self.net = net
        self.params = dict(net.named_params())
        size = sum(p.num_parameters() for p in self.params.values())
        self.flat = np.empty(size)
        self.grad = np.zeros(size)
        self.views = {}
        pos = 0
        for name, p in self.params.items():
            views = []
            for arrays in (p.weights, p.biases):
                for i, a in enumerate(arrays):
                    n = a.size
                    self.flat[pos:pos + n] = a.ravel()
                    arrays[i] = self.flat[pos:pos + n].reshape(a.shape)
                    views.append((pos, n))
                    pos += n
            self.views[name] = views
        self.learning_rate = learning_rate
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, scheme, x, y):
        loss, grads = loss_and_grads(self.net, scheme, x, y)
        self.grad[...] = 0.0
        for name, g in grads.items():
            for (pos, n), a in zip(self.views[name], g.weights + g.biases):
                self.grad[pos:pos + n] = a.ravel()
        self._adam()
        return loss

    def _adam(self, beta1=0.9, beta2=0.999, eps=1e-8):
        if not np.all(np.isfinite(self.grad)):
            raise nn.NumericalError("non-finite supernet gradient")
        self.t += 1
        c1 = 1.0 - beta1 ** self.t
        c2 = 1.0 - beta2 ** self.t
        self.m *= beta1
        self.m += (1.0 - beta1) * self.grad
        self.v *= beta2
        self.v += (1.0 - beta2) * (self.grad * self.grad)
        self.flat -= self.learning_rate * (self.m / c1) / (np.sqrt(self.v / c2) + eps)


def _minibatch(rng, data, batch_size):
    idx = rng.integers(0, data.x_train.shape[0], size=batch_size)
    return data.x_train[idx], data.y_train[idx]


def pretrain(net, data, steps, rng, connect_prob=0.5, batch_size=None, learning_rate=None):
    """Weight-sharing training: a fresh Bernoulli scheme and one minibatch per step.

    ``connect_prob`` may be a scalar or a per-block vector (tests use it to
    pin blocks off). Returns the per-step loss curve; ``net`` is trained in place.
    """
    cfg = net.config
    if steps < 1:
        raise ValueError("steps must be >= 1")
    batch_size = batch_size or cfg.batch_size
    trainer = Trainer(net, learning_rate or cfg.learning_rate)
    probs = np.broadcast_to(np.asarray(connect_prob, dtype=np.float64), (cfg.m,))
    losses = np.empty(steps)
    for t in range(steps):
        if np.all(probs == probs[0]):
            scheme = sample_bernoulli(cfg.m, float(probs[0]), rng, cfg.stage_sizes)
        else:
            scheme = ConnectionScheme((rng.random(cfg.m) < probs).astype(int), cfg.stage_sizes)
        xb, yb = _minibatch(rng, data, batch_size)
        losses[t] = trainer.step(scheme, xb, yb)
    return losses


def accuracy(net, scheme, x, y):
    pred = np.argmax(forward(net, scheme, x), axis=1)
    return int(np.count_nonzero(pred == y)) / len(y)


def proxy_eval(net, scheme, data):
    """Validation accuracy of the sub-network picked out by ``scheme``."""
    return accuracy(net, scheme, data.x_val, data.y_val)


def random_density_schemes(config, n, rng):
    """``n`` schemes whose connection density is itself drawn from U(0, 1).

    Plain Bernoulli(0.5) schemes all sit near half density, which leaves
    little spread in quality to correlate; drawing the density first covers
    the whole range.
    """
    out = []
    for _ in range(n):
        p = rng.random()
        out.append(ConnectionScheme((rng.random(config.m) < p).astype(int), config.stage_sizes))
    return out


def scratch_train(config, scheme, data, seed, steps=None):
    """Train fresh weights with ``scheme`` fixed; returns test accuracy."""
    rng = np.random.default_rng(seed)
    net = build_supernet(config, rng)
    trainer = Trainer(net, config.learning_rate)
    for _ in range(steps or config.scratch_steps):
        xb, yb = _minibatch(rng, data, config.batch_size)
        trainer.step(scheme, xb, yb)
    return accuracy(net, scheme, data.x_test, data.y_test)


# -- inference timing -------------------------------------------------------

def relative_increment(t_with, t_without):
    """Percentage slowdown of ``t_with`` over ``t_without``."""
    return (t_with - t_without) / t_without * 100.0


def _timed_pair(net, scheme, zero, x, repetitions, clock):
    """One run: ``repetitions`` forwards of each scheme, interleaved one by one.

    Returns the per-forward times ``(with_times, without_times)``; entry k of
    each side comes from the same adjacent pair. The order within a pair
    alternates (ABBA) so per-position effects cancel.
    """
    t_with = np.empty(repetitions)
    t_without = np.empty(repetitions)
    for k in range(repetitions):
        order = ((scheme, t_with), (zero, t_without))
        if k % 2:
            order = order[::-1]
        for s, out in order:
            start = clock()
            forward(net, s, x)
            out[k] = clock() - start
    return t_with, t_without


def measure_times(net, scheme, x, repetitions, runs=7, clock=time.perf_counter):
    """Paired per-forward times against the all-zero scheme, each of shape (runs, repetitions)."""
    zero = ConnectionScheme.zeros(net.config.m, net.config.stage_sizes)
    forward(net, scheme, x)
    forward(net, zero, x)
    pairs = [_timed_pair(net, scheme, zero, x, repetitions, clock) for _ in range(runs)]
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def time_increment(config, scheme, batch_size=50, repetitions=1000, runs=7,
                   clock=time.perf_counter, net=None, seed=0):
    """Relative inference time increment (%) of ``scheme`` over the plain network.

    Forwards of ``scheme`` and of the all-zero scheme on one fixed batch are
    interleaved in adjacent pairs, ``runs * repetitions`` pairs in all. The
    increment is the median paired difference over the median plain time; a
    background interruption spoils single pairs and the median ignores them.
    """
    if repetitions < 1 or runs < 1:
        raise ValueError("repetitions and runs must be >= 1")
    rng = np.random.default_rng(seed)
    if net is None:
        net = build_supernet(config, rng)
    x = rng.normal(size=(batch_size, net.config.input_dim))
    with threadpool_limits(limits=1):
        with_t, without_t = measure_times(net, scheme, x, repetitions, runs, clock)
    base = float(np.median(without_t))
    return relative_increment(base + float(np.median(with_t - without_t)), base)


# -- checkpoints ------------------------------------------------------------

def save_supernet(net, directory):
    """One nn-format file per parameter set plus ``supernet.json``; returns a digest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    names = []
    for name, p in net.named_params():
        nn.save_params(p, d / f"{name}.bin", {"module": name})
        digest.update(nn.params_to_bytes(p))
        names.append(name)
    meta = {
        "config": asdict(net.config),
        "modules": names,
        "attn_index": net.attn_index,
        "sha256": digest.hexdigest(),
    }
    (d / "supernet.json").write_text(json.dumps(meta, indent=2))
    return meta["sha256"]


def load_supernet(directory):
    d = Path(directory)
    meta = json.loads((d / "supernet.json").read_text())
    config = SupernetConfig(**meta["config"])
    params = {name: nn.load_params(d / f"{name}.bin") for name in meta["modules"]}
    n_stages = len(config.stage_widths)
    return Supernet(
        config,
        params["stem"],
        [params[f"proj{k}"] for k in range(1, n_stages)],
        [params[f"block{i}"] for i in range(config.m)],
        [params[n] for n in meta["modules"] if n.startswith("attn")],
        params["head"],
        list(meta["attn_index"]),
    )
