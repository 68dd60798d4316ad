"""In-memory message-passing MapReduce with eager and delayed reduction."""

__version__ = "0.1.0"
