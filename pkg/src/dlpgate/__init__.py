"""Gateway data-loss-prevention service speaking ICAP to an HTTP proxy."""

__version__ = "0.1.0"
