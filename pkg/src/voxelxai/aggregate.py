"""Cohort-level aggregation: PCA over per-subject maps, six-component
weighted averaging, three-way fusion, and the fusion-weight ablation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, VoxelXaiError
from .volume import (
    AffineTransform3D,
    Volume3D,
    WeightTensor,
    apply_affine,
    minmax_normalize,
    weighted_average,
)

SIX_COMPONENT_WEIGHTS = (0.85, 0.7, 0.5, 0.3, 0.1, 0.001)
FUSION_VALUES = {"8": 0.85, "5": 0.5, "1": 0.1}
ABLATION_CODES = ("851", "815", "185", "158", "518", "581")

GLOBAL_SOURCES = ("total_shape", "total_shap", "total_gradcam", "framework")


@dataclass(frozen=True)
class PCAModel:
    mean: np.ndarray  # (V,)
    components: np.ndarray  # (k, V), rows orthonormal
    explained_ratios: np.ndarray  # (k,), descending
    dims: tuple[int, int, int]

    @property
    def k(self):
        return self.components.shape[0]


@dataclass(frozen=True)
class GlobalExplanation:
    map: Volume3D
    source: str
    class_index: int
    modality: str = ""
    hemisphere: str = ""
    component_weights: tuple = ()

    def __post_init__(self):
        if self.source not in GLOBAL_SOURCES:
            raise VoxelXaiError(f"unknown global source: {self.source!r}")
        lo, hi = self.map.voxels.min(), self.map.voxels.max()
        if lo < -1e-12 or hi > 1.0 + 1e-12:
            raise VoxelXaiError("global explanation map must lie in [0, 1]")


@dataclass(frozen=True)
class FusionWeights:
    """(w_shape, w_shap, w_gradcam), a permutation of {0.85, 0.5, 0.1}."""

    weights: tuple[float, float, float]

    def __post_init__(self):
        if sorted(self.weights) != sorted(FUSION_VALUES.values()):
            raise VoxelXaiError(
                f"fusion weights must permute {tuple(FUSION_VALUES.values())}: "
                f"{self.weights}"
            )

    @classmethod
    def from_code(cls, code: str):
        if len(code) != 3 or any(c not in FUSION_VALUES for c in code):
            raise VoxelXaiError(f"bad fusion code: {code!r}")
        return cls(tuple(FUSION_VALUES[c] for c in code))

    @property
    def code(self):
        digits = {v: k for k, v in FUSION_VALUES.items()}
        return "".join(digits[w] for w in self.weights)


def fit_pca(samples, k: int) -> PCAModel:
    """Top-k principal directions in voxel space.

    Uses the Gram matrix when there are fewer samples than voxels. Sign
    convention: the largest-magnitude entry of each component is positive.
    """
    if k < 1:
        raise VoxelXaiError("k must be >= 1")
    if len(samples) < k:
        raise VoxelXaiError(f"need at least k={k} samples, got {len(samples)}")
    dims = samples[0].dims
    for s in samples[1:]:
        if s.dims != dims:
            raise DimensionMismatchError("samples share no common dims")
    X = np.stack([s.voxels for s in samples])
    n, V = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    total_var = (Xc**2).sum() / (n - 1) if n > 1 else 0.0
    if total_var <= 0.0:
        raise VoxelXaiError("zero-variance sample set")

    if n < V:
        gram = Xc @ Xc.T
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1][:k]
        lam = np.maximum(evals[order], 0.0) / (n - 1)
        comps = []
        for idx, mu in zip(order, evals[order]):
            if mu <= 1e-12 * max(1.0, evals.max()):
                raise VoxelXaiError(
                    f"rank of the sample set is below k={k}"
                )
            comps.append(Xc.T @ evecs[:, idx] / np.sqrt(mu))
        components = np.stack(comps)
    else:
        cov = Xc.T @ Xc / (n - 1)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][:k]
        lam = np.maximum(evals[order], 0.0)
        components = evecs[:, order].T

    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    ratios = lam / total_var
    return PCAModel(mean, components, ratios, dims)


def component_volume(m: PCAModel, i: int) -> Volume3D:
    """The i-th component reshaped to the source dims and normalized to [0, 1]."""
    if not 0 <= i < m.k:
        raise VoxelXaiError(f"component index {i} out of range (k={m.k})")
    return minmax_normalize(Volume3D(m.dims, m.components[i]))


def total_from_pca(
    m: PCAModel,
    source: str,
    class_index: int = 1,
    weights=SIX_COMPONENT_WEIGHTS,
    modality="",
    hemisphere="",
) -> GlobalExplanation:
    """Weighted average of the component volumes, then min-max normalized."""
    if m.k != len(weights):
        raise VoxelXaiError(
            f"PCA has {m.k} components but weight tensor has {len(weights)}"
        )
    vols = [component_volume(m, i) for i in range(m.k)]
    avg = weighted_average(vols, WeightTensor(tuple(weights)))
    return GlobalExplanation(
        minmax_normalize(avg),
        source,
        class_index,
        modality=modality,
        hemisphere=hemisphere,
        component_weights=tuple(weights),
    )


def fuse_framework(
    shape: GlobalExplanation,
    shap: GlobalExplanation,
    gradcam: GlobalExplanation,
    w: FusionWeights = FusionWeights.from_code("851"),
    align: dict | None = None,
) -> GlobalExplanation:
    """Three-way weighted average in the fixed order (shape, shap, gradcam).

    align optionally maps source name -> AffineTransform3D applied before
    fusion (stand-in for manual alignment of the global maps).
    """
    maps = []
    for name, g in (("shape", shape), ("shap", shap), ("gradcam", gradcam)):
        vol = g.map
        if align and name in align:
            vol = apply_affine(vol, align[name], maps[0].dims if maps else vol.dims)
        maps.append(vol)
    if not (maps[0].dims == maps[1].dims == maps[2].dims):
        raise DimensionMismatchError("fusion inputs do not share dims after alignment")
    fused = weighted_average(maps, WeightTensor(w.weights))
    return GlobalExplanation(
        minmax_normalize(fused),
        "framework",
        shape.class_index,
        modality=shape.modality,
        hemisphere=shape.hemisphere,
        component_weights=w.weights,
    )


@dataclass
class AblationRow:
    code: str
    explanation: GlobalExplanation
    faithfulness: float
    complexity: float


def run_ablation(shape, shap, gradcam, scorer, policy, align=None):
    """Score the six fusion-weight permutations; returns one row per code."""
    from .scoring import score_global

    rows = []
    for code in ABLATION_CODES:
        fused = fuse_framework(
            shape, shap, gradcam, FusionWeights.from_code(code), align=align
        )
        score = score_global(shape, fused, scorer, policy)
        rows.append(
            AblationRow(code, fused, score.faithfulness, score.complexity)
        )
    return rows
