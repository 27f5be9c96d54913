"""Federated multi-target domain adaptation with dual (client/server) adaptation."""

__version__ = "0.1.0"
