"""Efficient GAN-based anomaly detection: BiGAN scoring with an AnoGAN baseline."""

__version__ = "0.1.0"
