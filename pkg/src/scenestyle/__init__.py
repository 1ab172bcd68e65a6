"""Depth- and angle-aware style transfer for textured indoor scene meshes."""

from scenestyle.config import Config, ConfigError

__version__ = "0.1.0"

__all__ = ["Config", "ConfigError", "__version__"]
