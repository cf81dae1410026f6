"""Binary-to-semantic 3D occupancy prediction on procedural scenes."""

__version__ = "0.1.0"
