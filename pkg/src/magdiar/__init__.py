"""Magnitude-aware speaker verification and diarization back-end."""

__version__ = "0.1.0"
