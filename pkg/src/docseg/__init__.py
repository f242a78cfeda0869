"""Unified document image segmentation at desk scale.

A single model covers layout analysis, text detection and table structure
recognition by treating all of them as joint instance + semantic
segmentation. Class names are embedded into semantic queries that act both
as segmentation prompts and as classification prototypes, so one set of
weights serves datasets with different class lists.
"""

__version__ = "0.1.0"
