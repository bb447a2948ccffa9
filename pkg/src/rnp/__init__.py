"""Recurrent Neural Processes for one-step time-series prediction with uncertainty."""

__version__ = "0.1.0"
