"""Shared exception base so the CLI can map domain failures to one exit code."""


class GeofactError(Exception):
    """Base class for all domain errors raised by this package."""
