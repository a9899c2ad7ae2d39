"""Invariant shape representation learning on 2D images.

Deformation-based shape features (geodesic shooting of EPDiff) fused with
image features and trained under the IRMv1 penalty across environments.
"""

__version__ = "0.1.0"
