"""Multi-behavior recommendation with multi-identity users and chained transitions."""

from .kernels import BACKEND

__version__ = "0.1.0"
