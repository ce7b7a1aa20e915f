"""Desk-scale microwave tomography with edge elements and Schwarz preconditioning."""

__version__ = "0.1.0"
