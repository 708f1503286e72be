"""Two-stage frequency-domain image inpainting."""

__version__ = "0.1.0"
