"""Executable kernel for fault-tolerant choreographic sagas."""

__version__ = "0.1.0"
