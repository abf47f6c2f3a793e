"""Residential prosumer flexibility co-simulation and multiprotocol gateway."""

__version__ = "0.1.0"
