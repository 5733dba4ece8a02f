"""Ordered, fault-tolerant pipelines of expensive compute tasks."""

__version__ = "0.1.0"
