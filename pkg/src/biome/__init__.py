"""BioME: modulation-aware bioacoustic encoder with layer-wise distillation."""

__version__ = "0.1.0"
