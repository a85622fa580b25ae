"""Deformable registration with a PCA-decomposed latent space.

The pipeline trains an encoder/decoder registration network whose latent
difference drives a cumulative-sum deformation grid, decomposes the learned
latent space with PCA into elementary deformations, and ships probes plus an
HTTP service for exploring what each principal component encodes.
"""

__version__ = "0.1.0"
