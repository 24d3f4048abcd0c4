"""Conditional bisimulation metrics for contextual MDPs."""

__version__ = "0.1.0"
