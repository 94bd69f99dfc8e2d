"""Multi-objective design optimization over interchangeable task runners."""

__version__ = "0.1.0"
