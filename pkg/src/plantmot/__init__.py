"""Multi-view 3D tomato tracking engine with a synthetic greenhouse simulator."""

__version__ = "0.1.0"
