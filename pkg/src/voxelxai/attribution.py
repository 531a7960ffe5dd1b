"""Per-input attribution maps: 3D GradCAM and Shapley values over supervoxels.

Scorers are batched callables f(batch) -> (n,) where batch is an
(n, d, h, w) array; masked evaluations are grouped into batches so model
scorers amortize their forward cost.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, VoxelXaiError
from .nn.network import Model, grad_wrt_activation
from .volume import Volume3D, minmax_normalize, resize_trilinear

EVAL_CHUNK = 128  # masked volumes per scorer call


@dataclass(frozen=True)
class SupervoxelPartition:
    """Assigns every voxel to exactly one of n_segments segments."""

    labels: np.ndarray  # flat int array, row-major x-fastest
    n_segments: int
    dims: tuple[int, int, int]

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        w, h, d = self.dims
        if labels.size != w * h * d:
            raise DimensionMismatchError("partition labels do not cover the volume")
        counts = np.bincount(labels, minlength=self.n_segments)
        if labels.min() < 0 or labels.max() >= self.n_segments or (counts == 0).any():
            raise VoxelXaiError("segment labels must be 0..n_segments-1, all nonempty")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    def masks(self):
        """(n_segments, V) boolean membership matrix."""
        return self.labels[None, :] == np.arange(self.n_segments)[:, None]

    def segment_sums(self, flat_values):
        return np.bincount(self.labels, weights=flat_values, minlength=self.n_segments)


@dataclass(frozen=True)
class AttributionMap:
    map: Volume3D
    method: str  # "gradcam" | "shap"
    class_index: int
    subject_id: str = ""
    segment_values: np.ndarray | None = None

    def __post_init__(self):
        if self.method not in ("gradcam", "shap"):
            raise VoxelXaiError(f"unknown attribution method: {self.method!r}")


def make_partition(dims, block_size) -> SupervoxelPartition:
    """Axis-aligned blocks tiling the volume; boundary blocks may be smaller."""
    if block_size < 1:
        raise VoxelXaiError("block_size must be >= 1")
    w, h, d = dims
    nx = math.ceil(w / block_size)
    ny = math.ceil(h / block_size)
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    labels = (
        (x // block_size) + nx * ((y // block_size) + ny * (z // block_size))
    )
    nz = math.ceil(d / block_size)
    return SupervoxelPartition(labels.reshape(-1), nx * ny * nz, tuple(dims))


def weighted_activation_map(activations, gradients):
    """Raw GradCAM map at feature-map resolution.

    activations, gradients: (C, Z, Y, X). Importance of map n is the global
    average of its gradient; returns relu(sum_n alpha_n * A_n), shape (Z, Y, X).
    """
    activations = np.asarray(activations, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    if activations.shape != gradients.shape:
        raise DimensionMismatchError("activation/gradient shape mismatch")
    alpha = gradients.mean(axis=(1, 2, 3))
    cam = np.einsum("c,czyx->zyx", alpha, activations)
    return np.maximum(cam, 0.0)


def gradcam3d(model: Model, x: Volume3D, class_index: int, subject_id="") -> AttributionMap:
    """GradCAM at the final conv level, upsampled to input dims and min-max
    normalized to [0, 1]."""
    grads = grad_wrt_activation(model, x, class_index)
    acts = model.tap_activation[0]
    cam = weighted_activation_map(acts, grads)
    vol = resize_trilinear(Volume3D.from_array(cam), x.dims)
    return AttributionMap(minmax_normalize(vol), "gradcam", class_index, subject_id)


def _masked_batch(x_flat, baseline_flat, seg_masks, subsets):
    """Inputs with all segments outside each subset replaced by the baseline."""
    keep = subsets @ seg_masks  # (n_subsets, V) in {0, 1}
    return baseline_flat[None, :] + keep * (x_flat - baseline_flat)[None, :]


def _score_subsets(f, x, baseline, seg_masks, subsets):
    """Evaluate f on masked inputs for each row of the subset indicator matrix."""
    d, h, w = x.to_array().shape
    x_flat = x.voxels
    b_flat = baseline.voxels
    out = np.empty(len(subsets))
    for i in range(0, len(subsets), EVAL_CHUNK):
        chunk = subsets[i : i + EVAL_CHUNK]
        batch = _masked_batch(x_flat, b_flat, seg_masks, chunk)
        vals = np.asarray(f(batch.reshape(len(chunk), d, h, w)), dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise VoxelXaiError("scorer returned non-finite values")
        out[i : i + EVAL_CHUNK] = vals
    return out


def _check_shapley_inputs(x, p, baseline):
    if baseline.dims != x.dims:
        raise DimensionMismatchError("baseline dims != input dims")
    if p.dims != x.dims:
        raise DimensionMismatchError("partition dims != input dims")


def _segment_map(phi, p: SupervoxelPartition, class_index, subject_id):
    vox = phi[p.labels]
    return AttributionMap(
        Volume3D(p.dims, vox), "shap", class_index, subject_id, segment_values=phi
    )


def shapley_exact(
    f, x: Volume3D, p: SupervoxelPartition, baseline: Volume3D, class_index=1, subject_id=""
) -> AttributionMap:
    """Exact Shapley values per segment by subset enumeration (d <= 16)."""
    _check_shapley_inputs(x, p, baseline)
    d = p.n_segments
    if d > 16:
        raise VoxelXaiError(f"exact enumeration limited to d <= 16, got {d}")
    seg_masks = p.masks().astype(np.float64)

    # indicator row per subset, indexed by bitmask
    n_sub = 1 << d
    bits = ((np.arange(n_sub)[:, None] >> np.arange(d)[None, :]) & 1).astype(np.float64)
    values = _score_subsets(f, x, baseline, seg_masks, bits)

    fact = [math.factorial(k) for k in range(d + 1)]
    w_by_size = np.array(
        [fact[s] * fact[d - s - 1] / fact[d] for s in range(d)]
    )
    sizes = bits.sum(axis=1).astype(int)
    phi = np.zeros(d)
    masks_int = np.arange(n_sub)
    for i in range(d):
        without = (masks_int >> i) & 1 == 0
        s_idx = masks_int[without]
        gains = values[s_idx | (1 << i)] - values[s_idx]
        phi[i] = float((w_by_size[sizes[s_idx]] * gains).sum())
    return _segment_map(phi, p, class_index, subject_id)


def shapley_sampled(
    f,
    x: Volume3D,
    p: SupervoxelPartition,
    baseline: Volume3D,
    n_permutations: int,
    seed: int,
    class_index=1,
    subject_id="",
    chunk_permutations=256,
) -> AttributionMap:
    """Unbiased permutation-sampling Shapley estimate, deterministic per seed."""
    _check_shapley_inputs(x, p, baseline)
    if n_permutations < 1:
        raise VoxelXaiError("n_permutations must be >= 1")
    d = p.n_segments
    seg_masks = p.masks().astype(np.float64)
    rng = np.random.default_rng(seed)
    totals = np.zeros(d)
    for start in range(0, n_permutations, chunk_permutations):
        n_chunk = min(chunk_permutations, n_permutations - start)
        perms = np.stack([rng.permutation(d) for _ in range(n_chunk)])
        # prefix-subset indicators along each permutation chain: (n_chunk, d+1, d)
        chains = np.zeros((n_chunk, d + 1, d))
        for j in range(d):
            chains[:, j + 1] = chains[:, j]
            chains[np.arange(n_chunk), j + 1, perms[:, j]] = 1.0
        values = _score_subsets(
            f, x, baseline, seg_masks, chains.reshape(-1, d)
        ).reshape(n_chunk, d + 1)
        gains = np.diff(values, axis=1)  # (n_chunk, d), gain of perms[:, j]
        for j in range(d):
            np.add.at(totals, perms[:, j], gains[:, j])
    return _segment_map(totals / n_permutations, p, class_index, subject_id)
