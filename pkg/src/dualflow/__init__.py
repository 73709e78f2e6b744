"""Two-person motion generation with a retrieval-conditioned rectified flow."""

__version__ = "0.1.0"
