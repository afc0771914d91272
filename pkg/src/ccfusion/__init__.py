"""Coupled-contrastive infrared/visible (and MRI/functional) image fusion."""

__version__ = "0.1.0"
