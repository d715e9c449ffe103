"""Two-stage prototype-conditioned diffusion in numpy."""

__version__ = "0.1.0"
