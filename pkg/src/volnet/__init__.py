"""Attention-tapped 3-D ResNet engine for volumetric binary classification."""
