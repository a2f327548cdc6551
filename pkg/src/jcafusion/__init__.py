"""Joint cross-attentional audio-visual fusion for valence/arousal regression."""

__version__ = "0.1.0"
