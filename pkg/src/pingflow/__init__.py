"""Disaster-risk mobility analytics over raw GPS pings, on a partitioned out-of-core engine."""

__version__ = "0.1.0"
