"""Mixture of intra- and inter-modality experts on a toy bimodal transformer."""

__version__ = "0.1.0"
