"""Relationship proposal ranking with knowledge distillation over
precomputed region features."""

from .core import TOOL_VERSION as __version__

__all__ = ["__version__"]
