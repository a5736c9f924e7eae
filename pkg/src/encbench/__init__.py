"""Adversarial test bench for learnable block-wise image encryption."""

__version__ = "0.1.0"
