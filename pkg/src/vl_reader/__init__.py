"""VL-Reader - scene-text recognition with masked visual-linguistic reconstruction."""

__version__ = "0.1.0"
