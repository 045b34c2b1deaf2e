"""ProbAct - stochastic activation functions with exact gradients, plus an experiment CLI."""

__version__ = "0.1.0"
