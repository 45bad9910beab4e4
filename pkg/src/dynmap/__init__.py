"""LiDAR mapping and re-localization with movable-object filtering."""

__version__ = "0.1.0"
