"""Simulation, training and evaluation toolkit for overlapped multi-lens microscopy."""

__version__ = "0.1.0"
