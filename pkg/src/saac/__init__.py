"""Hourly population presence from partially observed device events."""

__version__ = "0.1.0"
