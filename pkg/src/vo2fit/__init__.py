"""Cardiorespiratory fitness estimation from free-living wearable data."""

__version__ = "0.1.0"
