"""Connection schemes: which blocks get wired to their stage's attention module.

Bit ``i`` of a scheme is 1 when block ``i`` (0 = shallowest) applies the
shared attention mask to its residual output. The text form writes each
stage as a run of '0'/'1' characters, shallowest block first, with stages
separated by '/', e.g. ``"110/01"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ShapeError

PROB_CLAMP = 1e-6


class SchemeParseError(ValueError):
    def __init__(self, message, position):
        super().__init__(f"{message} at index {position}")
        self.position = position


@dataclass(frozen=True)
class ConnectionScheme:
    bits: tuple[int, ...]
    stage_sizes: tuple[int, ...]

    def __init__(self, bits, stage_sizes=None):
        bits = tuple(int(b) for b in np.asarray(bits).ravel().tolist())
        if stage_sizes is None:
            stage_sizes = (len(bits),)
        stage_sizes = tuple(int(s) for s in stage_sizes)
        if any(b not in (0, 1) for b in bits):
            raise ValueError("scheme bits must be 0 or 1")
        if any(s <= 0 for s in stage_sizes):
            raise ValueError(f"stage sizes must be positive: {stage_sizes}")
        if sum(stage_sizes) != len(bits):
            raise ShapeError(
                f"stage sizes {stage_sizes} sum to {sum(stage_sizes)}, scheme has {len(bits)} bits"
            )
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "stage_sizes", stage_sizes)

    @property
    def m(self):
        return len(self.bits)

    def as_array(self):
        return np.array(self.bits, dtype=np.float64)

    def popcount(self):
        return sum(self.bits)

    def stage_of(self):
        """Stage index for every block."""
        return [k for k, size in enumerate(self.stage_sizes) for _ in range(size)]

    def __str__(self):
        return encode(self)

    @classmethod
    def zeros(cls, m, stage_sizes=None):
        return cls([0] * m, stage_sizes)

    @classmethod
    def ones(cls, m, stage_sizes=None):
        return cls([1] * m, stage_sizes)


def encode(scheme):
    out, pos = [], 0
    for size in scheme.stage_sizes:
        out.append("".join("1" if b else "0" for b in scheme.bits[pos:pos + size]))
        pos += size
    return "/".join(out)


def decode(text):
    bits, stage_sizes, current = [], [], 0
    for i, ch in enumerate(text):
        if ch == "/":
            if current == 0:
                raise SchemeParseError("empty stage", i)
            stage_sizes.append(current)
            current = 0
        elif ch in "01":
            bits.append(1 if ch == "1" else 0)
            current += 1
        else:
            raise SchemeParseError(f"illegal character {ch!r}", i)
    if current == 0:
        raise SchemeParseError("empty stage", len(text))
    stage_sizes.append(current)
    return ConnectionScheme(bits, stage_sizes)


def sample_bernoulli(m, p, rng, stage_sizes=None):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return ConnectionScheme((rng.random(m) < p).astype(int), stage_sizes)


def sample_from_probs(probs, rng, stage_sizes=None):
    probs = np.asarray(probs, dtype=np.float64)
    return ConnectionScheme((rng.random(probs.size) < probs).astype(int), stage_sizes)


def clamp_probs(probs):
    return np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)


def _bits(scheme):
    if isinstance(scheme, ConnectionScheme):
        return scheme.as_array()
    return np.asarray(scheme, dtype=np.float64)


def realized_probs(probs, scheme):
    """Probability the policy assigns to each bit of ``scheme``: p if a=1 else 1-p."""
    p = np.asarray(probs, dtype=np.float64)
    a = _bits(scheme)
    if p.shape != a.shape:
        raise ShapeError(f"probs length {p.shape} != scheme length {a.shape}")
    return (1.0 - a) * (1.0 - p) + a * p


def log_prob(probs, scheme):
    return float(np.sum(np.log(realized_probs(clamp_probs(probs), scheme))))


def sparsity_reward(scheme):
    """1 - (connected blocks) / m."""
    return 1.0 - scheme.popcount() / scheme.m


def all_schemes(m):
    """Every m-bit scheme as rows of a (2**m, m) uint8 array, in lexicographic string order."""
    codes = np.arange(2 ** m, dtype=np.int64)
    shifts = np.arange(m - 1, -1, -1, dtype=np.int64)
    return ((codes[:, None] >> shifts) & 1).astype(np.uint8)


def scheme_code(scheme):
    """Integer whose big-endian binary digits are the scheme bits; orders like the text."""
    return int("".join(map(str, scheme.bits)), 2)

