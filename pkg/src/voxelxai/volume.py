"""Dense 3D volumes and the shared numeric primitives.

Layout convention, fixed project-wide: voxels are stored flat in row-major
order with x fastest, i.e. flat index = x + w * (y + h * z). The numpy view
of a volume is therefore shaped (d, h, w) and indexed [z, y, x].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backends
from .errors import (
    DimensionMismatchError,
    SingularTransformError,
    UndefinedCorrelationError,
    VoxelXaiError,
)


@dataclass(frozen=True)
class Volume3D:
    """Immutable dense scalar field on a (w, h, d) voxel grid."""

    dims: tuple[int, int, int]
    voxels: np.ndarray

    def __post_init__(self):
        w, h, d = self.dims
        if w < 1 or h < 1 or d < 1:
            raise VoxelXaiError(f"dims must be positive, got {self.dims}")
        vox = np.ascontiguousarray(self.voxels, dtype=np.float64).reshape(-1)
        if vox.size != w * h * d:
            raise DimensionMismatchError(
                f"expected {w * h * d} voxels for dims {self.dims}, got {vox.size}"
            )
        if not np.all(np.isfinite(vox)):
            raise VoxelXaiError("volume contains non-finite voxels")
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "dims", (int(w), int(h), int(d)))

    @classmethod
    def from_array(cls, arr) -> "Volume3D":
        """Build from a (d, h, w) array indexed [z, y, x]."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionMismatchError(f"expected 3 axes, got {arr.ndim}")
        d, h, w = arr.shape
        return cls((w, h, d), arr.reshape(-1))

    def to_array(self) -> np.ndarray:
        """Read-only (d, h, w) view."""
        w, h, d = self.dims
        return self.voxels.reshape(d, h, w)

    @property
    def n_voxels(self) -> int:
        return self.voxels.size


@dataclass(frozen=True)
class WeightTensor:
    """Strictly positive averaging weights."""

    weights: tuple[float, ...]

    def __post_init__(self):
        ws = tuple(float(w) for w in self.weights)
        if not ws:
            raise VoxelXaiError("weight tensor is empty")
        if any(w <= 0 for w in ws):
            raise VoxelXaiError(f"weights must be strictly positive: {ws}")
        object.__setattr__(self, "weights", ws)

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class AffineTransform3D:
    """Maps source voxel coords p (x, y, z) to output coords: linear @ p + translation."""

    linear: np.ndarray
    translation: np.ndarray
    interpolation: str = "trilinear"

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(lin)) <= 1e-12:
            raise SingularTransformError("linear part is singular")
        if self.interpolation not in ("nearest", "trilinear"):
            raise VoxelXaiError(f"unknown interpolation: {self.interpolation!r}")
        lin.flags.writeable = False
        tr.flags.writeable = False
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls, interpolation="trilinear"):
        return cls(np.eye(3), np.zeros(3), interpolation)

    @classmethod
    def translate(cls, shift, interpolation="nearest"):
        return cls(np.eye(3), np.asarray(shift, dtype=np.float64), interpolation)

    @classmethod
    def rotate_about_axis(cls, axis, degrees, center, interpolation="trilinear"):
        """Rotation about the x, y or z axis around a fixed center point."""
        theta = math.radians(degrees)
        c, s = math.cos(theta), math.sin(theta)
        if axis == "z":
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        elif axis == "y":
            rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        elif axis == "x":
            rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
        else:
            raise VoxelXaiError(f"unknown axis: {axis!r}")
        center = np.asarray(center, dtype=np.float64)
        return cls(rot, center - rot @ center, interpolation)

    @classmethod
    def scale(cls, factors, interpolation="trilinear"):
        return cls(np.diag(np.asarray(factors, dtype=np.float64)), np.zeros(3), interpolation)


def weighted_average(volumes, w: WeightTensor) -> Volume3D:
    """Voxelwise weighted mean: sum(w_i * x_i) / sum(w_i)."""
    if not volumes:
        raise VoxelXaiError("no volumes to average")
    if len(volumes) != len(w):
        raise DimensionMismatchError(
            f"{len(volumes)} volumes but {len(w)} weights"
        )
    dims = volumes[0].dims
    for v in volumes[1:]:
        if v.dims != dims:
            raise DimensionMismatchError(f"dims mismatch: {v.dims} vs {dims}")
    ws = np.asarray(w.weights, dtype=np.float64)
    stack = np.stack([v.voxels for v in volumes], axis=0)
    # computed relative to the first volume: better conditioned when the
    # inputs are close, and exact when they are identical
    ref = stack[0]
    out = ref + (ws[:, None] * (stack - ref)).sum(axis=0) / ws.sum()
    return Volume3D(dims, out)


def minmax_normalize(v: Volume3D) -> Volume3D:
    """Rescale to [0, 1]; a constant volume maps to all-zeros."""
    lo = v.voxels.min()
    hi = v.voxels.max()
    if hi == lo:
        return Volume3D(v.dims, np.zeros_like(v.voxels))
    return Volume3D(v.dims, (v.voxels - lo) / (hi - lo))


def apply_affine(v: Volume3D, t: AffineTransform3D, out_dims=None) -> Volume3D:
    """Resample by inverse-mapping output voxel coords; outside reads as 0."""
    if out_dims is None:
        out_dims = v.dims
    inv = np.linalg.inv(t.linear)
    offset = -inv @ t.translation
    out = backends.active().affine_resample(
        v.to_array(), inv, offset, tuple(int(x) for x in out_dims), t.interpolation
    )
    return Volume3D.from_array(out)


def pearson(a, b) -> float:
    """Pearson correlation of two equal-length series."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise DimensionMismatchError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise VoxelXaiError("pearson needs at least 2 samples")
    ac = a - a.mean()
    bc = b - b.mean()
    sa2 = ac @ ac
    sb2 = bc @ bc
    if sa2 == 0.0 or sb2 == 0.0:
        raise UndefinedCorrelationError(
            "zero variance in a series; correlation is undefined"
        )
    r = (ac @ bc) / math.sqrt(sa2 * sb2)
    return float(min(1.0, max(-1.0, r)))


def resize_trilinear(v: Volume3D, out_dims) -> Volume3D:
    """Resize with corner-aligned trilinear sampling (used for map upsampling)."""
    wo, ho, do = (int(x) for x in out_dims)
    w, h, d = v.dims
    def rate(src, dst):
        return (src - 1) / (dst - 1) if dst > 1 else 0.0
    inv = np.diag([rate(w, wo), rate(h, ho), rate(d, do)])
    out = backends.active().affine_resample(
        v.to_array(), inv, np.zeros(3), (wo, ho, do), "trilinear"
    )
    return Volume3D.from_array(out)
