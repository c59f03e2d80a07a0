"""Desk-scale flow-matching talking-motion toolkit."""

__version__ = "0.1.0"
