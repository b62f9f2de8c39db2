"""Affordance-guided dexterous manipulation at desk scale."""

__version__ = "0.1.0"
