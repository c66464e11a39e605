"""Online long-term 3D point tracking with multi-appearance cost-volume fusion."""

__version__ = "0.1.0"
