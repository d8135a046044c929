"""Semi-supervised IPM GAN critics (WGAN, WGAN-GP, Fisher, Sobolev) with the K+1 parametrization."""
__version__ = "0.1.0"
