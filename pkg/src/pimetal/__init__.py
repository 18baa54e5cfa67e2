"""Physics-aware modular meta-learning on irregular spatial graphs."""

__version__ = "0.1.0"
