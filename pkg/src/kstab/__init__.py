"""Numerical toolkit for toric Fano manifolds: flows, geodesic rays and destabilizers."""

__version__ = "0.1.0"
