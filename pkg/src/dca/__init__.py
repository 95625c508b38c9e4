"""Decrits-style consensus: record chain, voice ledger, scheduling, node engine and simulator."""

__version__ = "0.1.0"
