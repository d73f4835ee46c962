"""Jointly trained ASR->MT speech-translation cascade at desk scale."""

__version__ = "0.1.0"
