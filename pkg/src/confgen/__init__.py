"""Conformation sampling for small molecules.

A conditional VAE over interatomic distances on an extended molecular graph,
a distance-geometry solver turning predicted distance bounds into Cartesian
coordinates, an MMD evaluation harness, and a self-normalized importance
sampler for Boltzmann-averaged properties.
"""

__version__ = "0.1.0"
