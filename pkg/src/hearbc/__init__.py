"""Audio-visual imitation learning with contact-microphone audio."""

__version__ = "0.1.0"
