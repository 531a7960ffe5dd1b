"""Pure-numpy implementations of the hot kernels.

Shared contract with the compiled backend:
  - conv3d: kernel 3x3x3, stride 1, zero padding 1 ("same"), float64
  - arrays are channels-first, (batch, channel, z, y, x)
  - affine_resample maps output voxel coords through an inverse transform
    given in (x, y, z) order; samples outside the source grid read as 0
"""

import numpy as np

NAME = "numpy"


def conv3d_forward(x, w, b):
    """x: (n, ci, D, H, W); w: (co, ci, 3, 3, 3); b: (co,) -> (n, co, D, H, W)."""
    n, ci, D, H, W = x.shape
    co = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    y = np.zeros((n, co, D, H, W), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                xs = xp[:, :, i : i + D, j : j + H, k : k + W]
                # (n, ci, D, H, W) x (co, ci) contracted over ci
                y += np.einsum("ncdhw,oc->nodhw", xs, w[:, :, i, j, k])
    y += b[None, :, None, None, None]
    return y


def conv3d_backward(x, w, gy):
    """Gradients of conv3d_forward: returns (gx, gw, gb)."""
    n, ci, D, H, W = x.shape
    co = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                xs = xp[:, :, i : i + D, j : j + H, k : k + W]
                gw[:, :, i, j, k] = np.einsum("nodhw,ncdhw->oc", gy, xs)
                gxp[:, :, i : i + D, j : j + H, k : k + W] += np.einsum(
                    "nodhw,oc->ncdhw", gy, w[:, :, i, j, k]
                )
    gx = gxp[:, :, 1 : 1 + D, 1 : 1 + H, 1 : 1 + W]
    gb = gy.sum(axis=(0, 2, 3, 4))
    return gx, gw, gb


def affine_resample(src, inv_linear, inv_offset, out_dims, mode):
    """Resample a (D, H, W) source through an inverse affine map.

    For each output voxel with coords p = (x, y, z):
        s = inv_linear @ p + inv_offset
    and the source is sampled at s (nearest or trilinear, zero outside).
    out_dims is (w, h, d).
    """
    D, H, W = src.shape
    wo, ho, do = out_dims
    zo, yo, xo = np.meshgrid(
        np.arange(do, dtype=np.float64),
        np.arange(ho, dtype=np.float64),
        np.arange(wo, dtype=np.float64),
        indexing="ij",
    )
    m = np.asarray(inv_linear, dtype=np.float64)
    t = np.asarray(inv_offset, dtype=np.float64)
    sx = m[0, 0] * xo + m[0, 1] * yo + m[0, 2] * zo + t[0]
    sy = m[1, 0] * xo + m[1, 1] * yo + m[1, 2] * zo + t[1]
    sz = m[2, 0] * xo + m[2, 1] * yo + m[2, 2] * zo + t[2]

    if mode == "nearest":
        ix = np.floor(sx + 0.5).astype(np.int64)
        iy = np.floor(sy + 0.5).astype(np.int64)
        iz = np.floor(sz + 0.5).astype(np.int64)
        inside = (
            (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H) & (iz >= 0) & (iz < D)
        )
        out = np.zeros((do, ho, wo), dtype=np.float64)
        out[inside] = src[iz[inside], iy[inside], ix[inside]]
        return out

    if mode != "trilinear":
        raise ValueError(f"unknown interpolation mode: {mode!r}")

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    z0 = np.floor(sz).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    fz = sz - z0
    out = np.zeros((do, ho, wo), dtype=np.float64)
    for dz in (0, 1):
        wz = fz if dz else 1.0 - fz
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dx in (0, 1):
                wx = fx if dx else 1.0 - fx
                ix = x0 + dx
                iy = y0 + dy
                iz = z0 + dz
                valid = (
                    (ix >= 0)
                    & (ix < W)
                    & (iy >= 0)
                    & (iy < H)
                    & (iz >= 0)
                    & (iz < D)
                )
                vals = np.zeros((do, ho, wo), dtype=np.float64)
                vals[valid] = src[iz[valid], iy[valid], ix[valid]]
                out += wz * wy * wx * vals
    return out
