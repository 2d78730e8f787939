"""Continual learning by merging low-rank adapters, with during-training sign alignment."""

__version__ = "0.1.0"
