"""Landmark maps, self-localization and path planning from network flows over image trajectories."""

__version__ = "0.1.0"
