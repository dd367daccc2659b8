"""Spatiotemporal graph transformer recommender for location-aware services."""

__version__ = "0.1.0"
