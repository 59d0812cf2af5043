"""Weakly supervised lesion segmentation by classifier-guided healthy edits and Hide-and-Seek
occlusion, with a linear latent model and synthetic vertebra phantoms."""

__version__ = "0.1.0"
