"""Self-labelled bulk mail with hop-by-hop spam complaint penalties."""

__version__ = "0.1.0"
