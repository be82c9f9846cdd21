"""3D semantic representations for instruction-following navigation, at desk scale."""

__version__ = "0.1.0"
