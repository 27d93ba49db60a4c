"""Feature-informed data assimilation toolkit."""

__version__ = "0.1.0"
