"""Deterministic simulator for synchronous and semi-asynchronous federated learning."""

__version__ = "0.1.0"
