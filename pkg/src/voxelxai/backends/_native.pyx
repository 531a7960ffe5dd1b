# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels (3x3x3 conv and affine resampling).

Semantics mirror numpy_kernels exactly; see that module for the contract.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef extern from "math.h" nogil:
    double floor(double)

NAME = "native"


def conv3d_forward(cnp.ndarray x_in, cnp.ndarray w_in, cnp.ndarray b_in):
    cdef const double[:, :, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef const double[:, :, :, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(b_in, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t co = w.shape[0]
    out_arr = np.zeros((n, co, D, H, W), dtype=np.float64)
    cdef double[:, :, :, :, ::1] y = out_arr
    cdef Py_ssize_t b_i, o, c, z, r, q, i, j, k, zz, yy, xx
    cdef double acc, wv
    with nogil:
        for b_i in range(n):
            for o in range(co):
                for z in range(D):
                    for r in range(H):
                        for q in range(W):
                            acc = b[o]
                            for c in range(ci):
                                for i in range(3):
                                    zz = z + i - 1
                                    if zz < 0 or zz >= D:
                                        continue
                                    for j in range(3):
                                        yy = r + j - 1
                                        if yy < 0 or yy >= H:
                                            continue
                                        for k in range(3):
                                            xx = q + k - 1
                                            if xx < 0 or xx >= W:
                                                continue
                                            acc += w[o, c, i, j, k] * x[b_i, c, zz, yy, xx]
                            y[b_i, o, z, r, q] = acc
    return out_arr


def conv3d_backward(cnp.ndarray x_in, cnp.ndarray w_in, cnp.ndarray gy_in):
    cdef const double[:, :, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef const double[:, :, :, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef const double[:, :, :, :, ::1] gy = np.ascontiguousarray(gy_in, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t co = w.shape[0]
    gx_arr = np.zeros((n, ci, D, H, W), dtype=np.float64)
    gw_arr = np.zeros((co, ci, 3, 3, 3), dtype=np.float64)
    gb_arr = np.zeros(co, dtype=np.float64)
    cdef double[:, :, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t b_i, o, c, z, r, q, i, j, k, zz, yy, xx
    cdef double g
    with nogil:
        for b_i in range(n):
            for o in range(co):
                for z in range(D):
                    for r in range(H):
                        for q in range(W):
                            g = gy[b_i, o, z, r, q]
                            gb[o] += g
                            for c in range(ci):
                                for i in range(3):
                                    zz = z + i - 1
                                    if zz < 0 or zz >= D:
                                        continue
                                    for j in range(3):
                                        yy = r + j - 1
                                        if yy < 0 or yy >= H:
                                            continue
                                        for k in range(3):
                                            xx = q + k - 1
                                            if xx < 0 or xx >= W:
                                                continue
                                            gw[o, c, i, j, k] += g * x[b_i, c, zz, yy, xx]
                                            gx[b_i, c, zz, yy, xx] += g * w[o, c, i, j, k]
    return gx_arr, gw_arr, gb_arr


def affine_resample(cnp.ndarray src_in, inv_linear, inv_offset, out_dims, mode):
    cdef const double[:, :, ::1] src = np.ascontiguousarray(src_in, dtype=np.float64)
    cdef const double[:, ::1] m = np.ascontiguousarray(inv_linear, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(inv_offset, dtype=np.float64)
    cdef Py_ssize_t D = src.shape[0], H = src.shape[1], W = src.shape[2]
    cdef Py_ssize_t wo = out_dims[0], ho = out_dims[1], do = out_dims[2]
    out_arr = np.zeros((do, ho, wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef bint nearest
    if mode == "nearest":
        nearest = True
    elif mode == "trilinear":
        nearest = False
    else:
        raise ValueError(f"unknown interpolation mode: {mode!r}")
    cdef Py_ssize_t z, y, x, ix, iy, iz, dx, dy, dz, jx, jy, jz
    cdef double sx, sy, sz, fx, fy, fz, acc, wgt
    with nogil:
        for z in range(do):
            for y in range(ho):
                for x in range(wo):
                    sx = m[0, 0] * x + m[0, 1] * y + m[0, 2] * z + t[0]
                    sy = m[1, 0] * x + m[1, 1] * y + m[1, 2] * z + t[1]
                    sz = m[2, 0] * x + m[2, 1] * y + m[2, 2] * z + t[2]
                    if nearest:
                        ix = <Py_ssize_t>floor(sx + 0.5)
                        iy = <Py_ssize_t>floor(sy + 0.5)
                        iz = <Py_ssize_t>floor(sz + 0.5)
                        if 0 <= ix < W and 0 <= iy < H and 0 <= iz < D:
                            out[z, y, x] = src[iz, iy, ix]
                    else:
                        ix = <Py_ssize_t>floor(sx)
                        iy = <Py_ssize_t>floor(sy)
                        iz = <Py_ssize_t>floor(sz)
                        fx = sx - floor(sx)
                        fy = sy - floor(sy)
                        fz = sz - floor(sz)
                        acc = 0.0
                        for dz in range(2):
                            jz = iz + dz
                            if jz < 0 or jz >= D:
                                continue
                            for dy in range(2):
                                jy = iy + dy
                                if jy < 0 or jy >= H:
                                    continue
                                for dx in range(2):
                                    jx = ix + dx
                                    if jx < 0 or jx >= W:
                                        continue
                                    wgt = (fz if dz else 1.0 - fz) * \
                                          (fy if dy else 1.0 - fy) * \
                                          (fx if dx else 1.0 - fx)
                                    acc += wgt * src[jz, jy, jx]
                        out[z, y, x] = acc
    return out_arr
