"""Simulation of a decentralised oracle network with reputation-gated consensus."""

__version__ = "0.1.0"
