"""Event-camera tracking-any-point pipeline at desk scale."""

__version__ = "0.1.0"
