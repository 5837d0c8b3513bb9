"""Routed panel-of-experts triage over tokenized clinical event streams."""

__version__ = "0.1.0"
