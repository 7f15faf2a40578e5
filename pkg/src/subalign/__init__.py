"""Subdomain-aware domain adaptation: division, matching, alignment, fusion."""

__version__ = "0.1.0"
