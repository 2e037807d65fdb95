"""Review corpus preprocessing: k-core filtering, per-entity review pooling,
and sentence-embedding extraction into the DUPE interchange format."""

__version__ = "0.1.0"
