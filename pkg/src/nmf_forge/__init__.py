"""Simulate Noisy Measurement Files and turn them into usable estimates."""

__version__ = "0.1.0"
