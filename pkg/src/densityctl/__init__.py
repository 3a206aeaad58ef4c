"""Density-based multi-robot control with safety and energy guarantees.

Core numerics live in the submodules (grid, density, world, planner,
controller, qp); the closed-loop simulation is orchestrated by harness, and
service/cli expose it over HTTP and the command line.
"""

__version__ = "0.1.0"
