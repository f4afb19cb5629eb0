"""Uneven-terrain navigation for car-like robots.

Elevation mapping, SE(2) traversability grids, flatness-based trajectory
optimisation and a closed-loop simulation harness.
"""

__version__ = "0.1.0"
