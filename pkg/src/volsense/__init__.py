"""Volumetric CNN toolkit: 3D convolutional classification of 4D series with sensitivity maps."""
