"""Robustness, saliency alignment and their decomposition bounds for ReLU networks."""

__version__ = "0.1.0"
