"""Desk-scale video feature codec with per-task feature space transforms."""

__version__ = "0.1.0"
