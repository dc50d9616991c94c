"""In-place 3D scene completion at desk scale."""

__version__ = "0.1.0"
