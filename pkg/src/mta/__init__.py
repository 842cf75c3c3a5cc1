"""Merge-then-adapt personalization over a small differentiable backbone."""

__version__ = "0.1.0"
