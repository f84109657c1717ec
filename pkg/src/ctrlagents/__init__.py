"""Agent-driven controller tuning over simulated benchmark plants."""

__version__ = "0.1.0"
