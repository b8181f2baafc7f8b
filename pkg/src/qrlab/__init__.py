"""Training laboratory for query-recollection strategies on staged detection decoders."""

__version__ = "0.1.0"
