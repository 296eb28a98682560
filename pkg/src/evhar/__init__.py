"""Event-camera human action recognition with a lightweight 3D CNN in numpy."""

__version__ = "0.1.0"
