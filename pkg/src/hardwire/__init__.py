"""Compile Po2-quantized CNNs into rewire-and-accumulate netlists and model their cost."""

__version__ = "0.1.0"
