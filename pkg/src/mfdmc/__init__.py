"""Matrix factorization with dynamic multi-view clustering."""

__version__ = "0.1.0"
