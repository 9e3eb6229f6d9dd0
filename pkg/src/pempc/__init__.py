"""Parallel explicit MPC: precomputed stage solution maps, a fixed-iteration
real-time controller, offline certification, and a closed-loop simulator."""

__version__ = "0.1.0"
