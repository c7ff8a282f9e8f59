"""Waveform-to-waveform singing voice conversion at desk scale."""

__version__ = "0.1.0"
