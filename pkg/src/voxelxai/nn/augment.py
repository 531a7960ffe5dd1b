"""Training-time augmentation: in-plane rotation, integer shifts, and
ZCA-whitening noise fit on the training split only."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..volume import AffineTransform3D, Volume3D, apply_affine


@dataclass
class AugmentConfig:
    rotate_deg: float = 15.0
    max_shift: int = 2  # voxels, per in-plane axis
    zca: bool = False
    zca_eps: float = 1e-2

    @classmethod
    def for_dims(cls, dims, zca=False):
        # the reference setting is 20-voxel shifts on ~128-voxel images
        w = dims[0]
        return cls(max_shift=max(1, round(w * 20 / 128)), zca=zca)


class ZCAWhitener:
    """ZCA whitening fit on the training split; eigenvalues are regularized
    before the inverse square root. Uses the thin SVD so the voxel-space
    covariance is never materialized."""

    def __init__(self, eps=1e-2):
        self.eps = float(eps)
        self.mean = None

    def fit(self, X):
        """X: (n, V) flattened training volumes."""
        X = np.asarray(X, dtype=np.float64)
        self.mean = X.mean(axis=0)
        Xc = X - self.mean
        n = X.shape[0]
        _, s, vt = np.linalg.svd(Xc, full_matrices=False)
        lam = s**2 / max(1, n - 1)
        self.vt = vt
        self.scale = 1.0 / np.sqrt(lam + self.eps)
        self.residual_scale = 1.0 / np.sqrt(self.eps)
        return self

    def transform(self, x_flat):
        xc = x_flat - self.mean
        proj = self.vt @ xc
        in_span = self.vt.T @ (self.scale * proj)
        out_span = (xc - self.vt.T @ proj) * self.residual_scale
        return in_span + out_span


def shift_volume(arr, sx, sy, sz=0):
    """Integer shift of a (d, h, w) array with zero fill."""
    out = np.zeros_like(arr)
    d, h, w = arr.shape

    def rng(n, s):
        return (max(0, s), min(n, n + s)), (max(0, -s), min(n, n - s))

    (z0, z1), (zs0, zs1) = rng(d, sz)
    (y0, y1), (ys0, ys1) = rng(h, sy)
    (x0, x1), (xs0, xs1) = rng(w, sx)
    if z0 < z1 and y0 < y1 and x0 < x1:
        out[z0:z1, y0:y1, x0:x1] = arr[zs0:zs1, ys0:ys1, xs0:xs1]
    return out


def augment(x: Volume3D, cfg: AugmentConfig, rng, whitener: ZCAWhitener | None = None) -> Volume3D:
    """Randomly rotate in-plane about the center, shift in x/y, and optionally
    ZCA-whiten. A zero-magnitude config is the identity."""
    arr = x.to_array()
    w, h, d = x.dims
    if cfg.rotate_deg > 0:
        angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
        center = ((w - 1) / 2.0, (h - 1) / 2.0, (d - 1) / 2.0)
        t = AffineTransform3D.rotate_about_axis("z", angle, center)
        arr = apply_affine(Volume3D.from_array(arr), t).to_array()
    if cfg.max_shift > 0:
        sx = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))
        sy = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))
        if sx or sy:
            arr = shift_volume(arr, sx, sy)
    if cfg.zca and whitener is not None:
        arr = whitener.transform(arr.reshape(-1)).reshape(arr.shape)
    return Volume3D.from_array(arr)
