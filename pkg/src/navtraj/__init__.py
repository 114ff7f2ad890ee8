"""Destination-conditioned trajectory generation on road networks."""

__version__ = "0.1.0"
