"""Flexibility activation signals and three-phase resource activation for LV feeders."""

__version__ = "0.1.0"
