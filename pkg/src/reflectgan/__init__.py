"""Vegetation-to-bare-soil reflectance reconstruction with a conditional GAN,
and SOC regression on corrected spectra."""

__version__ = "0.1.0"
