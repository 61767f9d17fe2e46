"""Learned-bitwidth quantization for neural fields."""

__version__ = "0.1.0"
