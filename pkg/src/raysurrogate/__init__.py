"""Offline decision-transformer surrogate for indoor wireless ray tracing."""

__version__ = "0.1.0"
