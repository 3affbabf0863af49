"""Small dense networks in float64 with hand-written backprop.

Everything here works on either a single vector of shape ``(d,)`` or a
batch of shape ``(n, d)``; batches are summed over in the parameter
gradients.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("relu", "sigmoid", "identity")

CHECKPOINT_MAGIC = b"ATSMLP01"
CHECKPOINT_FORMAT = "attnsearch-mlp/1"


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def sigmoid(z):
    return expit(z)


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return expit(z)
    return z


def _activation_grad(kind, z, out):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(z)


@dataclass
class MlpParams:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        n = len(self.layer_dims) - 1
        if n < 1 or any(int(d) <= 0 for d in self.layer_dims):
            raise ShapeError(f"bad layer_dims {self.layer_dims}")
        if not (len(self.weights) == len(self.biases) == len(self.activations) == n):
            raise ShapeError("weights/biases/activations must have one entry per layer")
        self.layer_dims = [int(d) for d in self.layer_dims]
        for i in range(n):
            w = self.weights[i]
            b = self.biases[i]
            if w.shape != (self.layer_dims[i + 1], self.layer_dims[i]):
                raise ShapeError(f"layer {i}: weight shape {w.shape}")
            if b.shape != (self.layer_dims[i + 1],):
                raise ShapeError(f"layer {i}: bias shape {b.shape}")
            if self.activations[i] not in ACTIVATIONS:
                raise ValueError(f"unknown activation {self.activations[i]!r}")

    @classmethod
    def _unchecked(cls, layer_dims, weights, biases, activations):
        obj = cls.__new__(cls)
        obj.layer_dims = layer_dims
        obj.weights = weights
        obj.biases = biases
        obj.activations = activations
        return obj

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def arrays(self):
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self):
        return MlpParams(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def zeros_like(self):
        return MlpParams(
            list(self.layer_dims),
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            list(self.activations),
        )

    def num_parameters(self):
        return sum(a.size for a in self.arrays())

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_parameters():
            raise ShapeError(f"expected {self.num_parameters()} values, got {vec.size}")
        pos = 0
        for a in self.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def bitwise_equal(self, other):
        if self.layer_dims != other.layer_dims or self.activations != other.activations:
            return False
        return all(
            a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays())
        )


# Gradients have exactly the same layout as the parameters they belong to.
GradientBundle = MlpParams


def init_mlp(layer_dims, activations, rng, zero_last=False):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    if isinstance(activations, str):
        activations = [activations] * (len(layer_dims) - 1)
    weights, biases = [], []
    for i in range(len(layer_dims) - 1):
        fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        weights.append(w)
        biases.append(b)
    if zero_last:
        weights[-1][...] = 0.0
        biases[-1][...] = 0.0
    return MlpParams(list(layer_dims), weights, biases, list(activations))


def _check_input(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match input width {params.in_dim}")
    return x


def forward_cache(params, x):
    """Forward pass keeping pre- and post-activations for backprop.

    Returns ``(outputs, cache)`` where ``cache`` is a list of
    ``(layer_input, pre_activation, post_activation)`` per layer.
    """
    h = _check_input(params, x)
    cache = []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = h @ w.T + b
        out = _activate(act, z)
        cache.append((h, z, out))
        h = out
    return h, cache


def mlp_forward(params, x):
    return forward_cache(params, x)[0]


def backward_cache(params, cache, upstream):
    """Backprop ``upstream`` (d loss / d output) through a cached forward.

    Returns ``(grads, d_input)``.
    """
    delta = np.asarray(upstream, dtype=np.float64)
    out_shape = cache[-1][2].shape
    if delta.shape != out_shape:
        raise ShapeError(f"upstream shape {delta.shape} != output shape {out_shape}")
    n = params.n_layers
    gw, gb = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        h, z, out = cache[i]
        act = params.activations[i]
        if act != "identity":
            delta = delta * _activation_grad(act, z, out)
        if delta.ndim == 1:
            gw[i] = np.outer(delta, h)
            gb[i] = delta.copy()
        else:
            gw[i] = delta.T @ h
            gb[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i]
    grads = MlpParams._unchecked(params.layer_dims, gw, gb, params.activations)
    return grads, delta


def mlp_backward(params, x, upstream_grad):
    """Gradient of ``upstream_grad . mlp_forward(params, x)`` w.r.t. every parameter."""
    _, cache = forward_cache(params, x)
    return backward_cache(params, cache, upstream_grad)[0]


@dataclass
class OptimizerState:
    kind: str = "sgd"
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: MlpParams | None = field(default=None, repr=False)
    v: MlpParams | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")

    def copy(self):
        return OptimizerState(
            self.kind, self.learning_rate, self.beta1, self.beta2, self.eps, self.step,
            None if self.m is None else self.m.copy(),
            None if self.v is None else self.v.copy(),
        )


def optimizer_step(params, grads, state, direction="descend"):
    """Apply one update in place and return ``params``.

    ``direction="ascend"`` moves along ``+grads`` (policy gradient),
    ``"descend"`` along ``-grads``.
    """
    if direction not in ("ascend", "descend"):
        raise ValueError(f"direction must be 'ascend' or 'descend', not {direction!r}")
    if params.layer_dims != grads.layer_dims:
        raise ShapeError("gradient shape does not match parameters")
    if not grads.is_finite():
        raise NumericalError("non-finite gradient")
    sign = 1.0 if direction == "ascend" else -1.0
    lr = state.learning_rate
    state.step += 1
    if state.kind == "sgd":
        for p, g in zip(params.arrays(), grads.arrays()):
            p += (sign * lr) * g
        return params

    if state.m is None:
        state.m = params.zeros_like()
        state.v = params.zeros_like()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p += (sign * lr) * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# -- checkpoints ------------------------------------------------------------
#
# Binary layout (all little-endian):
#   8 bytes   magic "ATSMLP01"
#   uint32    number of layer dims D
#   uint32*D  layer_dims
#   uint8*(D-1) activation codes (index into ACTIVATIONS)
#   then per layer: weights row-major float64, biases float64

def params_to_bytes(params):
    dims = params.layer_dims
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", len(dims)),
        struct.pack(f"<{len(dims)}I", *dims),
        bytes(ACTIVATIONS.index(a) for a in params.activations),
    ]
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def params_from_bytes(data):
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not an MLP checkpoint (bad magic)")
    pos = 8
    (n_dims,) = struct.unpack_from("<I", data, pos)
    pos += 4
    dims = list(struct.unpack_from(f"<{n_dims}I", data, pos))
    pos += 4 * n_dims
    acts = [ACTIVATIONS[c] for c in data[pos:pos + n_dims - 1]]
    pos += n_dims - 1
    weights, biases = [], []
    for i in range(n_dims - 1):
        n_w = dims[i + 1] * dims[i]
        w = np.frombuffer(data, dtype="<f8", count=n_w, offset=pos).astype(np.float64)
        pos += 8 * n_w
        b = np.frombuffer(data, dtype="<f8", count=dims[i + 1], offset=pos).astype(np.float64)
        pos += 8 * dims[i + 1]
        weights.append(w.reshape(dims[i + 1], dims[i]))
        biases.append(b)
    if pos != len(data):
        raise ValueError(f"trailing bytes in checkpoint ({len(data) - pos})")
    return MlpParams(dims, weights, biases, acts)


def save_params(params, path, metadata=None):
    """Write ``path`` (binary) and ``path`` + ``.json`` (sidecar)."""
    path = Path(path)
    blob = params_to_bytes(params)
    path.write_bytes(blob)
    sidecar = {
        "format": CHECKPOINT_FORMAT,
        "layer_dims": params.layer_dims,
        "activations": params.activations,
        "num_parameters": params.num_parameters(),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "metadata": metadata or {},
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_params(path, verify=True):
    path = Path(path)
    blob = path.read_bytes()
    sidecar_path = Path(str(path) + ".json")
    if verify and sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text())
        if sidecar.get("sha256") != hashlib.sha256(blob).hexdigest():
            raise ValueError(f"{path}: checksum does not match sidecar")
    return params_from_bytes(blob)
