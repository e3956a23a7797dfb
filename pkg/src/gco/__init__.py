"""gco: garment-centric outpainting on a synthetic fashion corpus"""

__version__ = "0.1.0"
