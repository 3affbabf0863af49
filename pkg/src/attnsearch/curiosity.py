"""Random network distillation novelty bonus over schemes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .scheme import ConnectionScheme

DEFAULT_HIDDEN = 32
DEFAULT_EMBED = 16
DEFAULT_LR = 1e-3


@dataclass
class RndPair:
    target: nn.MlpParams
    predictor: nn.MlpParams
    predictor_optimizer: nn.OptimizerState
    normalize: bool = False
    # running second moment of raw bonuses, used only when normalize is on
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def __post_init__(self):
        if (self.target.in_dim != self.predictor.in_dim
                or self.target.out_dim != self.predictor.out_dim):
            raise nn.ShapeError("target and predictor widths must match")

    @property
    def embed_dim(self):
        return self.target.out_dim


def make_rnd(m, rng, hidden=DEFAULT_HIDDEN, embed_dim=DEFAULT_EMBED, lr=DEFAULT_LR,
             copy_target=False, normalize=False):
    dims = [m, hidden, embed_dim]
    acts = ["relu", "identity"]
    target = nn.init_mlp(dims, acts, rng)
    predictor = target.copy() if copy_target else nn.init_mlp(dims, acts, rng)
    return RndPair(target, predictor, nn.OptimizerState("adam", lr), normalize)


def _as_input(scheme):
    if isinstance(scheme, ConnectionScheme):
        return scheme.as_array()
    return np.asarray(scheme, dtype=np.float64)


def raw_bonus(r, scheme):
    x = _as_input(scheme)
    diff = nn.mlp_forward(r.target, x) - nn.mlp_forward(r.predictor, x)
    return float(diff @ diff)


def rnd_bonus(r, scheme):
    """Squared distance between target and predictor embeddings of ``scheme``."""
    b = raw_bonus(r, scheme)
    if r.normalize:
        b = _normalized(r, b)
    return b


def _normalized(r, b):
    r.count += 1
    delta = b - r.mean
    r.mean += delta / r.count
    r.m2 += delta * (b - r.mean)
    if r.count < 2:
        return b
    std = np.sqrt(r.m2 / (r.count - 1))
    return b / std if std > 0 else b


def predictor_gradient(r, scheme):
    """Gradient of the raw bonus w.r.t. the predictor parameters."""
    x = _as_input(scheme)
    t = nn.mlp_forward(r.target, x)
    out, cache = nn.forward_cache(r.predictor, x)
    return nn.backward_cache(r.predictor, cache, 2.0 * (out - t))[0]


def rnd_train(r, scheme):
    """One descent step of the predictor toward the target on ``scheme``."""
    grads = predictor_gradient(r, scheme)
    nn.optimizer_step(r.predictor, grads, r.predictor_optimizer, "descend")
    return r
