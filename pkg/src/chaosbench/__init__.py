"""Benchmark suite for autoregressive surrogates of chaotic systems."""

__version__ = "0.1.0"
