"""Message classification with jointly trained text and metadata blocks."""

__version__ = "0.1.0"
