"""Biomarker-guided retrieval of whole-slide images.

Immunohistochemistry slides (CD30, PAX5) are filtered by small fuzzy
inference models, fused into an attention mask, and used to pick the H&E
patches that represent a slide in a searchable index.
"""

__version__ = "0.1.0"
