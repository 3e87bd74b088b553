"""Compositional CNN design lab: a small NHWC training engine, static
architecture analysis and Gaussian information-loss estimates."""

__version__ = "0.1.0"
