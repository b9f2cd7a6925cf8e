# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled front-to-back blending over per-tile splat lists.

Tiles are independent; every pixel and every list entry is written by exactly
one tile, so parallel execution matches sequential execution bit for bit.
"""
from cython.parallel cimport prange
from libc.math cimport exp, log, INFINITY
from libc.stdlib cimport malloc, free

import numpy as np


cdef double[::1] _cutoffs(const double[::1] opacity, double thresh):
    """Per-splat bound on q past which sigma < thresh, padded so the exact test still decides."""
    cdef Py_ssize_t n = opacity.shape[0], i
    cdef double[::1] out = np.empty(n, dtype=np.float64)
    for i in range(n):
        if thresh <= 0.0:
            out[i] = INFINITY
        elif opacity[i] < thresh:
            out[i] = -1.0
        else:
            out[i] = 2.0 * log(opacity[i] / thresh) * (1.0 + 1e-9) + 1e-9
    return out


cdef void _forward_tile(Py_ssize_t t, Py_ssize_t tiles_x, int tile, int height, int width,
                        const double[:, ::1] mean2d, const double[:, ::1] conic,
                        const double[::1] opacity, const double[:, ::1] color,
                        const Py_ssize_t[::1] offsets, const Py_ssize_t[::1] entries,
                        const double[::1] bg, double thresh, double floor, const double[::1] qmax,
                        double[:, :, ::1] image, double[:, ::1] trans) noexcept nogil:
    cdef Py_ssize_t ty = t // tiles_x
    cdef Py_ssize_t tx = t - ty * tiles_x
    cdef Py_ssize_t r0 = ty * tile, c0 = tx * tile
    cdef Py_ssize_t r1 = r0 + tile, c1 = c0 + tile
    cdef Py_ssize_t row, col, k, g
    cdef double px, py, dx, dy, q, s, T, w, cr, cg, cb
    if r1 > height:
        r1 = height
    if c1 > width:
        c1 = width
    for row in range(r0, r1):
        py = row + 0.5
        for col in range(c0, c1):
            px = col + 0.5
            T = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            for k in range(offsets[t], offsets[t + 1]):
                g = entries[k]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                if q > qmax[g]:
                    continue
                s = opacity[g] * exp(-0.5 * q)
                if s < thresh:
                    continue
                w = s * T
                cr = cr + color[g, 0] * w
                cg = cg + color[g, 1] * w
                cb = cb + color[g, 2] * w
                T = T * (1.0 - s)
                if T < floor:
                    break
            image[row, col, 0] = cr + T * bg[0]
            image[row, col, 1] = cg + T * bg[1]
            image[row, col, 2] = cb + T * bg[2]
            trans[row, col] = T


def forward(const double[:, ::1] mean2d, const double[:, ::1] conic, const double[::1] opacity,
            const double[:, ::1] color, const Py_ssize_t[::1] offsets, const Py_ssize_t[::1] entries,
            int height, int width, int tile, const double[::1] bg, double thresh, double floor,
            double[:, :, ::1] image, double[:, ::1] trans, int num_threads=1):
    cdef Py_ssize_t tiles_x = (width + tile - 1) // tile
    cdef Py_ssize_t n_tiles = tiles_x * ((height + tile - 1) // tile)
    cdef Py_ssize_t t
    cdef double[::1] qm = _cutoffs(opacity, thresh)
    if num_threads < 1:
        num_threads = 1
    for t in prange(n_tiles, nogil=True, num_threads=num_threads, schedule="dynamic"):
        _forward_tile(t, tiles_x, tile, height, width, mean2d, conic, opacity, color, offsets, entries,
                      bg, thresh, floor, qm, image, trans)


cdef void _backward_tile(Py_ssize_t t, Py_ssize_t tiles_x, int tile, int height, int width,
                         const double[:, ::1] mean2d, const double[:, ::1] conic,
                         const double[::1] opacity, const double[:, ::1] color,
                         const Py_ssize_t[::1] offsets, const Py_ssize_t[::1] entries,
                         const double[::1] bg, double thresh, double floor, const double[::1] qmax,
                         const double[:, :, ::1] grad_image,
                         double[:, ::1] g_mean, double[:, ::1] g_conic, double[::1] g_opac,
                         double[:, ::1] g_color) noexcept nogil:
    cdef Py_ssize_t ty = t // tiles_x
    cdef Py_ssize_t tx = t - ty * tiles_x
    cdef Py_ssize_t r0 = ty * tile, c0 = tx * tile
    cdef Py_ssize_t r1 = r0 + tile, c1 = c0 + tile
    cdef Py_ssize_t start = offsets[t], stop = offsets[t + 1]
    cdef Py_ssize_t n = stop - start
    cdef Py_ssize_t row, col, k, g, last
    cdef double px, py, dx, dy, q, s, T, a0, a1, a2, g0, g1, g2, gs, dq
    cdef double *sig
    cdef double *tb
    if n == 0:
        return
    if r1 > height:
        r1 = height
    if c1 > width:
        c1 = width
    sig = <double *> malloc(n * sizeof(double))
    tb = <double *> malloc(n * sizeof(double))
    for row in range(r0, r1):
        py = row + 0.5
        for col in range(c0, c1):
            px = col + 0.5
            g0 = grad_image[row, col, 0]
            g1 = grad_image[row, col, 1]
            g2 = grad_image[row, col, 2]
            if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                continue
            # replay the forward pass, keeping sigma and transmittance per entry
            T = 1.0
            last = start
            for k in range(start, stop):
                g = entries[k]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                last = k + 1
                if q > qmax[g]:
                    sig[k - start] = -1.0
                    continue
                s = opacity[g] * exp(-0.5 * q)
                if s < thresh:
                    sig[k - start] = -1.0
                    continue
                sig[k - start] = s
                tb[k - start] = T
                T = T * (1.0 - s)
                if T < floor:
                    break
            a0 = bg[0]
            a1 = bg[1]
            a2 = bg[2]
            for k in range(last - 1, start - 1, -1):
                s = sig[k - start]
                if s < 0.0:
                    continue
                g = entries[k]
                T = tb[k - start]
                g_color[k, 0] += g0 * s * T
                g_color[k, 1] += g1 * s * T
                g_color[k, 2] += g2 * s * T
                gs = T * (g0 * (color[g, 0] - a0) + g1 * (color[g, 1] - a1) + g2 * (color[g, 2] - a2))
                a0 = s * color[g, 0] + (1.0 - s) * a0
                a1 = s * color[g, 1] + (1.0 - s) * a1
                a2 = s * color[g, 2] + (1.0 - s) * a2
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                if opacity[g] > 0.0:
                    g_opac[k] += gs * s / opacity[g]
                else:
                    g_opac[k] += gs * exp(-0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                                                  + conic[g, 2] * dy * dy))
                dq = -0.5 * gs * s
                g_mean[k, 0] += -2.0 * dq * (conic[g, 0] * dx + conic[g, 1] * dy)
                g_mean[k, 1] += -2.0 * dq * (conic[g, 1] * dx + conic[g, 2] * dy)
                g_conic[k, 0] += dq * dx * dx
                g_conic[k, 1] += dq * 2.0 * dx * dy
                g_conic[k, 2] += dq * dy * dy
    free(sig)
    free(tb)


def backward(const double[:, ::1] mean2d, const double[:, ::1] conic, const double[::1] opacity,
             const double[:, ::1] color, const Py_ssize_t[::1] offsets, const Py_ssize_t[::1] entries,
             int height, int width, int tile, const double[::1] bg, double thresh, double floor,
             const double[:, :, ::1] grad_image, double[:, ::1] g_mean, double[:, ::1] g_conic,
             double[::1] g_opac, double[:, ::1] g_color, int num_threads=1):
    """Per-entry gradients; the caller reduces entries onto splats."""
    cdef Py_ssize_t tiles_x = (width + tile - 1) // tile
    cdef Py_ssize_t n_tiles = tiles_x * ((height + tile - 1) // tile)
    cdef Py_ssize_t t
    cdef double[::1] qm = _cutoffs(opacity, thresh)
    if num_threads < 1:
        num_threads = 1
    for t in prange(n_tiles, nogil=True, num_threads=num_threads, schedule="dynamic"):
        _backward_tile(t, tiles_x, tile, height, width, mean2d, conic, opacity, color, offsets, entries,
                       bg, thresh, floor, qm, grad_image, g_mean, g_conic, g_opac, g_color)
