"""Simulation and numerics for heterogeneous contagious McKean-Vlasov systems."""

__version__ = "0.1.0"
