"""Simulation and verification toolkit for backoff protocols under Poisson arrivals."""

__version__ = "0.1.0"
