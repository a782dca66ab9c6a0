"""Replay-attack spoofing detection with subsidiary-information frameworks."""

__version__ = "0.1.0"
