"""Cascaded piano hand-motion synthesis from MIDI and fingering."""

__version__ = "0.1.0"
