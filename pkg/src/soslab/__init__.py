"""Continuous-height SOS interface in a random multi-well potential."""

__version__ = "0.1.0"
