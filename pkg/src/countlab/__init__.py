"""Counting networks as weak supervision: training, probes and localization."""

__version__ = "0.1.0"
