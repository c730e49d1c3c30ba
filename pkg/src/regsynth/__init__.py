"""Joint synthesis and registration of cross-modality 2D image pairs."""

__version__ = "0.1.0"
