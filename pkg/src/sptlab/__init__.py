"""Desk-scale self-pretraining laboratory for small attention models."""

__version__ = "0.1.0"
