"""Deep reinforcement learning for intraday trading with positional context."""

__version__ = "0.1.0"
