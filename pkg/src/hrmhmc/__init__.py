"""Adaptive hierarchical Riemannian-manifold HMC."""

__version__ = "0.1.0"
