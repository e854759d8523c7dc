"""Conditional 3D GAN augmentation pipeline for lung-nodule detection."""

__version__ = "0.1.0"
