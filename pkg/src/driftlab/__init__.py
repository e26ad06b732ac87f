"""Drift-mitigated RL fine-tuning of small sequence policies."""

__version__ = "0.1.0"
