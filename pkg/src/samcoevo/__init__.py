"""Cooperative NEAT coevolution of soft-actuator morphologies and controllers."""

__version__ = "0.1.0"
