"""Rotation-sensitive two-stage detector for oriented ships, in numpy."""

__version__ = "0.1.0"
