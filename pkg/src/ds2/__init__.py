"""Speech recognition training and deployment stack at desk scale."""

__version__ = "0.1.0"
