"""Face-verified dynamic gesture recognition engine."""

__version__ = "0.1.0"
