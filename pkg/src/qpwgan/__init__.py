"""Exact discrete optimal transport and (q,p)-Wasserstein GAN training."""

__version__ = "0.1.0"
