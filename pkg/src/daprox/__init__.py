"""Decision-aware proximal bridge learning for continuous treatments."""

__version__ = "0.1.0"
