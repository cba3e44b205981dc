"""Selective-scan sequence blocks, a latent diffusion sampler for synthetic
motion sequences, and a benchmark harness for the scaling claims."""

__version__ = "0.1.0"
