"""Rate-distortion-conditional-perception workbench on finite sources."""

__version__ = "0.1.0"
