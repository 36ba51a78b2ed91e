"""Embedding multiple sparse networks in one dense weight set, stored overhead-free."""

__version__ = "0.1.0"
