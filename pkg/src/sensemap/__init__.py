"""Prediction-guided frontier exploration on occupancy grids."""

__version__ = "0.1.0"
