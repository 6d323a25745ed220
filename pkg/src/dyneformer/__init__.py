"""Workload forecasting with a global pattern pool and static-context attention."""

__version__ = "0.1.0"
