"""Deterministic discrete-event simulator of Raft leader election with
pluggable election-timeout policies."""

__version__ = "0.1.0"
