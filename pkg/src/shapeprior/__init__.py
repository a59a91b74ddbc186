"""Low-rank shape models, target-specific realignment by projection, and partial-shape reconstruction."""

__version__ = "0.1.0"
