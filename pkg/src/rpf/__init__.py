"""Robust path following: simulator, learned attention-pointer controller and evaluation."""

__version__ = "0.1.0"
