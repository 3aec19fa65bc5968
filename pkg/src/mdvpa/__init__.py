"""Particle filters for the infinite HMM: bootstrap SMC, VPA and MD-VPA."""

__version__ = "0.1.0"
