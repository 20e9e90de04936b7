"""Reference-conditioned CT metal-artifact reduction with low-rank adapters."""

__version__ = "0.1.0"
