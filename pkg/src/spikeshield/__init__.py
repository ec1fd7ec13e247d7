"""Spiking-network image purification and adversarial-example detection."""

__version__ = "0.1.0"
