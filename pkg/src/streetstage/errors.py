"""Shared exception base for the staging engine."""


class StageError(Exception):
    """Base class for all domain errors raised by this package."""
