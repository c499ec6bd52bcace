# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled surface-distance kernels.

``squared_edt`` is the exact separable Euclidean distance transform of
Felzenszwalb & Huttenlocher (lower envelope of parabolas, one pass per axis),
generalised to anisotropic voxel spacing.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def surface(const cnp.uint8_t[:, :, ::1] mask):
    """Foreground voxels with a 6-connected background neighbour or on the
    volume boundary."""
    cdef Py_ssize_t nz = mask.shape[0], ny = mask.shape[1], nx = mask.shape[2]
    out_arr = np.zeros((nz, ny, nx), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t z, y, x
    with nogil:
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    if not mask[z, y, x]:
                        continue
                    if (z == 0 or z == nz - 1 or y == 0 or y == ny - 1 or x == 0 or x == nx - 1
                            or not mask[z - 1, y, x] or not mask[z + 1, y, x]
                            or not mask[z, y - 1, x] or not mask[z, y + 1, x]
                            or not mask[z, y, x - 1] or not mask[z, y, x + 1]):
                        out[z, y, x] = 1
    return out_arr


cdef void _envelope_1d(double* f, double* d, Py_ssize_t n, double w2,
                       Py_ssize_t* v, double* zb) noexcept nogil:
    # f: input squared distances along the line (INFINITY = no feature)
    # d: output; v, zb: scratch of size n and n + 1
    cdef Py_ssize_t q, p, k = -1
    cdef double s
    for q in range(n):
        if f[q] == INFINITY:
            continue
        while k >= 0:
            p = v[k]
            s = ((f[q] + w2 * q * q) - (f[p] + w2 * p * p)) / (2.0 * w2 * (q - p))
            if s <= zb[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        if k == 0:
            zb[0] = -INFINITY
        else:
            zb[k] = s
        zb[k + 1] = INFINITY
    if k < 0:
        for q in range(n):
            d[q] = INFINITY
        return
    k = 0
    for q in range(n):
        while zb[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = w2 * (q - p) * (q - p) + f[p]


def squared_edt(const cnp.uint8_t[:, :, ::1] features, spacing):
    """Squared Euclidean distance (in spacing units) from every voxel to the
    nearest nonzero voxel of ``features``; ``inf`` everywhere if there is none."""
    cdef Py_ssize_t nz = features.shape[0], ny = features.shape[1], nx = features.shape[2]
    cdef double wz = spacing[0], wy = spacing[1], wx = spacing[2]
    out_arr = np.empty((nz, ny, nx), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t nmax = max(nz, ny, nx)
    cdef double[::1] fbuf = np.empty(nmax, dtype=np.float64)
    cdef double[::1] dbuf = np.empty(nmax, dtype=np.float64)
    cdef double[::1] zbuf = np.empty(nmax + 1, dtype=np.float64)
    cdef Py_ssize_t[::1] vbuf = np.empty(nmax, dtype=np.intp)
    cdef Py_ssize_t z, y, x

    with nogil:
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    fbuf[x] = 0.0 if features[z, y, x] else INFINITY
                _envelope_1d(&fbuf[0], &out[z, y, 0], nx, wx * wx, &vbuf[0], &zbuf[0])
        for z in range(nz):
            for x in range(nx):
                for y in range(ny):
                    fbuf[y] = out[z, y, x]
                _envelope_1d(&fbuf[0], &dbuf[0], ny, wy * wy, &vbuf[0], &zbuf[0])
                for y in range(ny):
                    out[z, y, x] = dbuf[y]
        for y in range(ny):
            for x in range(nx):
                for z in range(nz):
                    fbuf[z] = out[z, y, x]
                _envelope_1d(&fbuf[0], &dbuf[0], nz, wz * wz, &vbuf[0], &zbuf[0])
                for z in range(nz):
                    out[z, y, x] = dbuf[z]
    return out_arr
