"""Reinforcement-learning synthesis of parameterized state-preparation circuits."""

__version__ = "0.1.0"
