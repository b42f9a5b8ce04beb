"""Anchor-less single-shot pedestrian detector engine."""

__version__ = "0.1.0"
