"""Dual-mode vision-language encoder with shared layers, trained at desk scale on synthetic scenes."""

__version__ = "0.1.0"
