"""Desk-scale laboratory for attention-mask alignment in toy video DiTs."""

__version__ = "0.1.0"

from .config import ModelConfig  # noqa: F401
