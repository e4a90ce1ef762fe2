"""Cross-sessions purchase recommendation for small insurance catalogs."""

__version__ = "0.1.0"
