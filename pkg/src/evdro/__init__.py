"""Data-driven distributionally robust rebalancing for electric-vehicle fleets."""

__version__ = "0.1.0"
