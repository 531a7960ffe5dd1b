"""Faithfulness and complexity scoring of attribution maps.

Faithfulness: Pearson correlation, over random segment subsets, between the
summed attribution of the perturbed segments and the drop in the scorer's
output when those segments are set to the baseline. Complexity: Shannon
entropy of the normalized per-segment attribution magnitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attribution import AttributionMap, SupervoxelPartition, _masked_batch
from .aggregate import GlobalExplanation
from .errors import (
    DimensionMismatchError,
    UndefinedCorrelationError,
    VoxelXaiError,
)
from .volume import Volume3D, pearson


@dataclass(frozen=True)
class PerturbationPolicy:
    partition: SupervoxelPartition
    baseline_value: float = 0.0  # zero, "black"
    n_draws: int = 70
    seed: int = 0

    def __post_init__(self):
        if self.n_draws < 2:
            raise VoxelXaiError("need at least 2 draws for a correlation")


@dataclass(frozen=True)
class ExplanationScore:
    faithfulness: float
    complexity: float
    n_perturbations: int
    baseline_value: float
    n_segments: int

    def __post_init__(self):
        if not -1.0 <= self.faithfulness <= 1.0:
            raise VoxelXaiError("faithfulness out of [-1, 1]")
        if self.complexity < 0 or self.complexity > math.log(self.n_segments) + 1e-9:
            raise VoxelXaiError("complexity out of [0, ln d]")


def _map_volume(g) -> Volume3D:
    if isinstance(g, (AttributionMap, GlobalExplanation)):
        return g.map
    if isinstance(g, Volume3D):
        return g
    raise VoxelXaiError(f"not an attribution map: {type(g).__name__}")


def _draw_subsets(d, n_draws, rng):
    """Each draw: size uniform in [1, max(1, d // 2)], then a uniform subset."""
    max_size = max(1, d // 2)
    subsets = np.zeros((n_draws, d))
    for t in range(n_draws):
        size = int(rng.integers(1, max_size + 1))
        subsets[t, rng.choice(d, size=size, replace=False)] = 1.0
    return subsets


def faithfulness(f, g, x: Volume3D, pol: PerturbationPolicy) -> float:
    gvol = _map_volume(g)
    if gvol.dims != x.dims:
        raise DimensionMismatchError("attribution dims != input dims")
    if pol.partition.dims != x.dims:
        raise DimensionMismatchError("partition dims != input dims")
    p = pol.partition
    seg_attr = p.segment_sums(gvol.voxels)

    rng = np.random.default_rng(pol.seed)
    subsets = _draw_subsets(p.n_segments, pol.n_draws, rng)
    attr_sums = subsets @ seg_attr

    baseline = Volume3D(x.dims, np.full(x.n_voxels, pol.baseline_value))
    seg_masks = p.masks().astype(np.float64)
    # masked input keeps the drawn segments at baseline, the rest unchanged
    masked = _masked_batch(x.voxels, baseline.voxels, seg_masks, 1.0 - subsets)
    d, h, w = x.to_array().shape
    f_x = float(np.asarray(f(x.to_array()[None]))[0])
    f_masked = np.asarray(f(masked.reshape(pol.n_draws, d, h, w)), dtype=np.float64)
    drops = f_x - f_masked

    try:
        return pearson(attr_sums, drops)
    except UndefinedCorrelationError as err:
        raise UndefinedCorrelationError(
            "faithfulness undefined: constant series over the draws "
            f"(attr var={attr_sums.var():.3g}, drop var={drops.var():.3g}); "
            "degenerate model or constant attributions"
        ) from err


def complexity(g, p: SupervoxelPartition) -> float:
    """Entropy of P(i) = |g_i| / sum_j |g_j| over segments; 0*log(1/0) := 0."""
    gvol = _map_volume(g)
    if gvol.dims != p.dims:
        raise DimensionMismatchError("attribution dims != partition dims")
    mags = np.abs(p.segment_sums(gvol.voxels))
    total = mags.sum()
    if total <= 0.0:
        raise VoxelXaiError("all-zero attribution has no complexity")
    probs = mags / total
    nz = probs > 0
    return float(-(probs[nz] * np.log(probs[nz])).sum())


def score_global(
    total_shape: GlobalExplanation,
    candidate,
    f,
    pol: PerturbationPolicy,
) -> ExplanationScore:
    """Score a global explanation against the cohort-statistics map: the
    shape map plays the input, the candidate plays the explanation."""
    faith = faithfulness(f, candidate, total_shape.map, pol)
    compx = complexity(candidate, pol.partition)
    return ExplanationScore(
        faithfulness=faith,
        complexity=compx,
        n_perturbations=pol.n_draws,
        baseline_value=pol.baseline_value,
        n_segments=pol.partition.n_segments,
    )
