"""Referring-expression grounding on a synthetic grid world, trained with
auxiliary triplet and contrastive objectives on top of a numpy autodiff core."""

__version__ = "0.1.0"
