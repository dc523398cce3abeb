"""Bouncing-ball simulation, synthetic video, and online system identification."""

__version__ = "0.1.0"
