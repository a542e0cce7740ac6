"""Volumetric CNN toolkit for three-stage dementia classification from paired T1/FLAIR MRI."""

__version__ = "0.1.0"
