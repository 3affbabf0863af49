"""Feed-forward policy over connection schemes, trained by policy gradient.

The controller maps a constant zero input to one sigmoid probability per
block. Updates:

* ``reinforce_update``: one ascent step on ``G * sum_i log p_hat_i``.
* ``ppo_update``: one ascent step along the batch mean of
  ``G * sum_i (p_hat_i / p_hat_old_i) * grad log p_hat_i`` over replayed
  records, with an optional clipped-ratio variant.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .scheme import (
    PROB_CLAMP,
    ConnectionScheme,
    clamp_probs,
    realized_probs,
    sample_from_probs,
)

log = logging.getLogger(__name__)

DEFAULT_INPUT_DIM = 8
DEFAULT_HIDDEN = 64
DEFAULT_LR = 0.005


@dataclass
class Controller:
    net: nn.MlpParams
    optimizer: nn.OptimizerState
    stage_sizes: tuple[int, ...]
    input_template: np.ndarray = field(default=None)
    ppo_clip: float | None = None

    def __post_init__(self):
        if self.input_template is None:
            self.input_template = np.zeros(self.net.in_dim)
        if self.net.out_dim != self.m or self.net.activations[-1] != "sigmoid":
            raise nn.ShapeError("controller output must be a sigmoid layer of width m")

    @property
    def m(self):
        return sum(self.stage_sizes)

    def copy(self):
        return Controller(
            self.net.copy(), self.optimizer.copy(), self.stage_sizes,
            self.input_template.copy(), self.ppo_clip,
        )


def make_controller(stage_sizes, rng, hidden=DEFAULT_HIDDEN, input_dim=DEFAULT_INPUT_DIM,
                    lr=DEFAULT_LR, optimizer="sgd", ppo_clip=None):
    """Build a controller whose output layer starts at zero (every probability 0.5)."""
    stage_sizes = tuple(int(s) for s in stage_sizes)
    m = sum(stage_sizes)
    if hidden:
        net = nn.init_mlp([input_dim, hidden, m], ["relu", "sigmoid"], rng, zero_last=True)
    else:
        net = nn.init_mlp([input_dim, m], ["sigmoid"], rng, zero_last=True)
    return Controller(net, nn.OptimizerState(optimizer, lr), stage_sizes, None, ppo_clip)


def raw_probs(c):
    return nn.mlp_forward(c.net, c.input_template)


def controller_probs(c):
    """Per-block connection probabilities, clamped away from 0 and 1."""
    return clamp_probs(raw_probs(c))


def sample_scheme(c, rng):
    probs = controller_probs(c)
    return probs, sample_from_probs(probs, rng, c.stage_sizes)


def _prob_upstream(raw, bits, coef):
    """d/dp of sum_i coef_i * log p_hat_i, zero where the clamp is active."""
    p = clamp_probs(raw)
    p_hat = realized_probs(p, bits)
    up = coef * (2.0 * bits - 1.0) / p_hat
    inside = (raw > PROB_CLAMP) & (raw < 1.0 - PROB_CLAMP)
    return np.where(inside, up, 0.0)


def reinforce_gradient(c, scheme, reward):
    """Gradient of ``reward * sum_i log p_hat_i`` w.r.t. the controller parameters."""
    bits = scheme.as_array() if isinstance(scheme, ConnectionScheme) else np.asarray(scheme, float)
    if bits.size != c.m:
        raise nn.ShapeError(f"scheme has {bits.size} bits, controller has {c.m}")
    out, cache = nn.forward_cache(c.net, c.input_template)
    up = _prob_upstream(out, bits, float(reward))
    return nn.backward_cache(c.net, cache, up)[0]


def reinforce_update(c, scheme, reward):
    """One ascent step on ``reward * log p(scheme)``. Mutates and returns ``c``."""
    reward = float(reward)
    if not np.isfinite(reward):
        raise nn.NumericalError(f"non-finite reward {reward}")
    if reward == 0.0:
        return c
    grads = reinforce_gradient(c, scheme, reward)
    nn.optimizer_step(c.net, grads, c.optimizer, "ascend")
    return c


@dataclass(frozen=True)
class TrajectoryRecord:
    probs_old: np.ndarray
    scheme: ConnectionScheme
    reward: float
    iteration: int = 0

    def __post_init__(self):
        if len(self.probs_old) != self.scheme.m:
            raise nn.ShapeError("probs_old and scheme lengths differ")
        if not np.isfinite(self.reward):
            raise nn.NumericalError("record reward must be finite")


def ppo_direction(c, batch):
    """Batch mean of ``G * sum_i ratio_i * grad log p_hat_i`` (ratios are not differentiated)."""
    out, cache = nn.forward_cache(c.net, c.input_template)
    p = clamp_probs(out)
    total = None
    for rec in batch:
        bits = rec.scheme.as_array()
        ratio = realized_probs(p, bits) / realized_probs(clamp_probs(rec.probs_old), bits)
        coef = rec.reward * ratio
        if c.ppo_clip is not None:
            eps = c.ppo_clip
            if rec.reward >= 0:
                coef = np.where(ratio > 1.0 + eps, 0.0, coef)
            else:
                coef = np.where(ratio < 1.0 - eps, 0.0, coef)
        g = nn.backward_cache(c.net, cache, _prob_upstream(out, bits, coef))[0]
        if total is None:
            total = g
        else:
            for acc, part in zip(total.arrays(), g.arrays()):
                acc += part
    for a in total.arrays():
        a /= len(batch)
    return total


def ppo_update(c, batch):
    """One ascent step along the replayed-batch direction. Returns ``(c, ok)``."""
    if not batch:
        log.warning("ppo_update called with an empty batch; skipping")
        return c, False
    direction = ppo_direction(c, batch)
    nn.optimizer_step(c.net, direction, c.optimizer, "ascend")
    return c, True


class ReplayBuffer:
    """FIFO ring of trajectory records, sampled uniformly with replacement."""

    def __init__(self, capacity=64):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def put(self, rec):
        self._items.append(rec)

    def sample(self, k, rng):
        if not self._items:
            raise IndexError("cannot sample from an empty replay buffer")
        if k < 1:
            raise ValueError("k must be >= 1")
        idx = rng.integers(0, len(self._items), size=k)
        return [self._items[i] for i in idx]


def buffer_put(b, rec):
    b.put(rec)
    return b


def buffer_sample(b, k, rng):
    return b.sample(k, rng)


def convergence_pbar(c, scheme):
    """Mean probability the controller gives to each bit of ``scheme``."""
    probs = controller_probs(c) if isinstance(c, Controller) else np.asarray(c, float)
    return float(np.mean(realized_probs(probs, scheme)))


def extract_scheme(c):
    """Threshold at 0.5; exact ties go to 0."""
    probs = controller_probs(c) if isinstance(c, Controller) else np.asarray(c, float)
    stage_sizes = c.stage_sizes if isinstance(c, Controller) else None
    return ConnectionScheme((probs > 0.5).astype(int), stage_sizes)
