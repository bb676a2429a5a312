"""Signed-distance shape codes and a pointwise physics surrogate conditioned on them."""

__version__ = "0.1.0"
