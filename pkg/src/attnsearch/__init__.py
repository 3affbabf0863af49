"""Reinforcement-learning search for sparse attention-module connection schemes."""

__version__ = "0.1.0"

from .scheme import ConnectionScheme, decode, encode  # noqa: E402

__all__ = ["ConnectionScheme", "decode", "encode", "__version__"]
