"""Inverting classifier representations with conditional autoregressive density models."""

__version__ = "0.1.0"
