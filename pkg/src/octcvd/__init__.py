"""Cardiovascular risk from retinal OCT volumes and patient metadata."""

__version__ = "0.1.0"
