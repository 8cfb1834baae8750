"""Steady water waves over periodic bottoms, computed spectrally from the Hamiltonian formulation."""

__version__ = "0.1.0"
