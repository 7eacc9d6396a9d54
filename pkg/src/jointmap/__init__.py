"""Joint query-intent and product-category classification toolkit."""

__version__ = "0.1.0"
