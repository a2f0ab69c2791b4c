"""Microphone-array audition: localization, tracking, and separation."""

__version__ = "0.1.0"
