"""Federated mixture-of-experts for non-overlapped cross-domain
sequential recommendation: library and desk-scale simulator."""

__version__ = "0.1.0"
