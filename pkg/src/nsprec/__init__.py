"""Session-wise generative retrieval: next session prediction at desk scale."""

__version__ = "0.1.0"
