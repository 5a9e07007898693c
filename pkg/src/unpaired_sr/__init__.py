"""Unpaired real-world super-resolution: learned degradation plus adaptive SR."""

__version__ = "0.1.0"
