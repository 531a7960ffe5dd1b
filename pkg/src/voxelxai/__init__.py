"""Volumetric explainable-AI toolkit.

Trains small 3D classifiers on voxel volumes, produces local attributions
(3D GradCAM, Shapley over supervoxels), aggregates them into global
explanations via PCA and weighted fusion, and scores every explanation with
faithfulness and complexity metrics.
"""

__version__ = "0.1.0"

from . import backends
from .volume import (
    AffineTransform3D,
    Volume3D,
    WeightTensor,
    apply_affine,
    minmax_normalize,
    pearson,
    weighted_average,
)

__all__ = [
    "backends",
    "AffineTransform3D",
    "Volume3D",
    "WeightTensor",
    "apply_affine",
    "minmax_normalize",
    "pearson",
    "weighted_average",
    "__version__",
]
