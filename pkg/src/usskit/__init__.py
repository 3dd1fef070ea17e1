"""Query-based universal sound separation on a desk-scale synthetic corpus."""

__version__ = "0.1.0"
