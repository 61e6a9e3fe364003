"""Medcap - dual-prompt medical image captioning and reference-free evaluation."""

from medcap.__version__ import __version__

__all__ = ["__version__"]
