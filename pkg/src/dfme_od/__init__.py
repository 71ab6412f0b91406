"""Data-free extraction of single-object detectors through a query-limited black box."""

__version__ = "0.1.0"
