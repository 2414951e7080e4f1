"""Mean-variance hedging under partial observation of the market price of risk."""

__version__ = "0.1.0"
