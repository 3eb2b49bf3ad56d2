"""Subject-aligned EEG decoding: preprocessing, alignment layers, training."""

__version__ = "0.1.0"
