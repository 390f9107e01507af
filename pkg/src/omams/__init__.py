"""Operator-machine allocation and monitoring: central unit, protocol, journal, simulator."""

__version__ = "0.1.0"
