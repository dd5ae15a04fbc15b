"""Scene recognition and response decisions for multi-party human-robot interaction."""

__version__ = "0.1.0"
