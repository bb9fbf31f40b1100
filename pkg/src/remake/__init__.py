"""Transparent-object depth completion with mask attention and relative depth cues."""

__version__ = "0.1.0"
