"""Concentration inequalities for ergodic diffusions observed at discrete times."""

__version__ = "0.1.0"
