"""Probabilistic region atlas: registration of a global map into atlas space
and voxel-per-region histograms at top-intensity thresholds."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import math

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionMismatchError, VoxelXaiError
from .volume import AffineTransform3D, Volume3D, apply_affine

NA_REGION = "NA"
DEFAULT_THRESHOLDS = (0.05, 0.10, 0.20)


@dataclass(frozen=True)
class ProbabilisticAtlas:
    region_names: tuple[str, ...]
    probabilities: np.ndarray  # (n_regions, d, h, w), per-voxel sums <= 1

    def __post_init__(self):
        probs = np.ascontiguousarray(self.probabilities, dtype=np.float64)
        if probs.ndim != 4 or probs.shape[0] != len(self.region_names):
            raise DimensionMismatchError("one probability volume per region required")
        if probs.min() < 0 or probs.max() > 1.0 + 1e-12:
            raise VoxelXaiError("probabilities must lie in [0, 1]")
        if probs.sum(axis=0).max() > 1.0 + 1e-6:
            raise VoxelXaiError("per-voxel probability sums exceed 1")
        probs.flags.writeable = False
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "region_names", tuple(self.region_names))

    @property
    def dims(self):
        _, d, h, w = self.probabilities.shape
        return (w, h, d)

    def save(self, directory):
        from .dataio import write_volume

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, vol in zip(self.region_names, self.probabilities):
            path = directory / f"region_{name}.xv3d"
            write_volume(path, Volume3D.from_array(vol), {"region": name})
            paths[name] = path.name
        manifest = {
            "region_names": list(self.region_names),
            "dims": list(self.dims),
            "files": paths,
        }
        (directory / "atlas.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory):
        from .dataio import read_volume

        directory = Path(directory)
        manifest = json.loads((directory / "atlas.json").read_text())
        vols = []
        for name in manifest["region_names"]:
            vol, _ = read_volume(directory / manifest["files"][name])
            vols.append(vol.to_array())
        return cls(tuple(manifest["region_names"]), np.stack(vols))


@dataclass(frozen=True)
class RegionHistogram:
    threshold: float
    counts: dict  # region name (incl. NA) -> voxel count

    def total(self):
        return sum(self.counts.values())


def register_to_atlas(
    g, a: ProbabilisticAtlas, t: AffineTransform3D
) -> Volume3D:
    """Resample an explanation map into atlas space."""
    vol = g.map if hasattr(g, "map") else g
    return apply_affine(vol, t, a.dims)


def threshold_histogram(
    g_in_atlas: Volume3D, a: ProbabilisticAtlas, fraction: float
) -> RegionHistogram:
    """Count the ceil(fraction * V) highest-intensity voxels per argmax region.

    Ties at the cut break by ascending voxel index; voxels with zero
    probability in every region count as NA.
    """
    if not 0.0 < fraction < 1.0:
        raise VoxelXaiError(f"fraction must be in (0, 1): {fraction}")
    if g_in_atlas.dims != a.dims:
        raise DimensionMismatchError("map dims != atlas dims")
    vox = g_in_atlas.voxels
    n_select = math.ceil(fraction * vox.size)
    order = np.lexsort((np.arange(vox.size), -vox))
    selected = order[:n_select]

    flat_probs = a.probabilities.reshape(len(a.region_names), -1)
    sel_probs = flat_probs[:, selected]
    best = sel_probs.argmax(axis=0)
    covered = sel_probs.max(axis=0) > 0.0

    counts = {name: 0 for name in a.region_names}
    counts[NA_REGION] = int((~covered).sum())
    labels, n_by_label = np.unique(best[covered], return_counts=True)
    for lab, cnt in zip(labels, n_by_label):
        counts[a.region_names[lab]] = int(cnt)
    return RegionHistogram(fraction, counts)


def make_synthetic_atlas(dims, n_regions, seed) -> ProbabilisticAtlas:
    """Smooth random probability blobs, normalized so per-voxel sums <= 1."""
    if n_regions < 1:
        raise VoxelXaiError("n_regions must be >= 1")
    w, h, d = dims
    rng = np.random.default_rng(seed)
    vols = []
    for _ in range(n_regions):
        blob = np.zeros((d, h, w))
        cz, cy, cx = (rng.integers(0, n) for n in (d, h, w))
        blob[cz, cy, cx] = 1.0
        blob = gaussian_filter(blob, sigma=max(1.0, min(dims) / 6.0))
        blob /= blob.max()
        vols.append(blob)
    probs = np.stack(vols)
    sums = probs.sum(axis=0)
    over = sums > 1.0
    if over.any():
        scale = np.ones_like(sums)
        scale[over] = 1.0 / sums[over]
        probs = probs * scale[None]
    return ProbabilisticAtlas(tuple(f"r{i:02d}" for i in range(n_regions)), probs)


def write_histogram_csv(path, histograms):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["region", "threshold", "count"])
        for hist in histograms:
            for region in sorted(hist.counts):
                wr.writerow([region, f"{hist.threshold:.2f}", hist.counts[region]])
