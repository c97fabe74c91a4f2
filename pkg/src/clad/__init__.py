"""CLaD: cross-modal latent dynamics with foresight-conditioned diffusion control."""

__version__ = "0.1.0"
