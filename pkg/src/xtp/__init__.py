"""Typed eXtract-Transform-Project dataflow engine."""

__version__ = "0.1.0"
