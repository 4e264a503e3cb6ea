"""Omni-directional Mamba scanning over spectrograms, with a toy
separation model, verification suites, and complexity benchmarks."""

from . import tensor, ssm, omniscan, signal, sepnet, bench, verify, cli  # noqa: F401

__version__ = "0.1.0"
