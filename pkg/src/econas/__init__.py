"""Energy-aware neural architecture search on a desk-scale simulated edge device."""

__version__ = "0.1.0"
