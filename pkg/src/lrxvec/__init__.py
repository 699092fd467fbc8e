"""Low-rank x-vector speaker embedding toolkit."""

__version__ = "0.1.0"
