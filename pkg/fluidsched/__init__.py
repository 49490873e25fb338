"""Fluid-model processor capacity allocation"""

__version__ = "1.0.0"
