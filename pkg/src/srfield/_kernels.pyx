# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled render and splat kernels.  Same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor

cnp.import_array()

BACKEND = "cython"


cdef inline void _locate(double p, double lo, double hi, int n, int* i0, double* f) noexcept nogil:
    cdef double u = (p - lo) / (hi - lo) * (n - 1)
    if u < 0.0:
        u = 0.0
    elif u > n - 1:
        u = n - 1
    cdef int i = <int>floor(u)
    if i > n - 2:
        i = n - 2
    i0[0] = i
    f[0] = u - i


cdef inline void _weights(double fx, double fy, double fz, double* w) noexcept nogil:
    w[0] = (1 - fx) * (1 - fy) * (1 - fz)
    w[1] = (1 - fx) * (1 - fy) * fz
    w[2] = (1 - fx) * fy * (1 - fz)
    w[3] = (1 - fx) * fy * fz
    w[4] = fx * (1 - fy) * (1 - fz)
    w[5] = fx * (1 - fy) * fz
    w[6] = fx * fy * (1 - fz)
    w[7] = fx * fy * fz


cdef inline void _sample(const double[:, :, ::1] dens, const double[:, :, :, ::1] col,
                         const double[::1] lo, const double[::1] hi, int n,
                         double px, double py, double pz,
                         double* sigma, double* c, int* corner, double* w) noexcept nogil:
    cdef int ix, iy, iz, k, dx, dy, dz
    cdef double fx, fy, fz
    _locate(px, lo[0], hi[0], n, &ix, &fx)
    _locate(py, lo[1], hi[1], n, &iy, &fy)
    _locate(pz, lo[2], hi[2], n, &iz, &fz)
    _weights(fx, fy, fz, w)
    sigma[0] = 0.0
    c[0] = 0.0
    c[1] = 0.0
    c[2] = 0.0
    k = 0
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                corner[3 * k] = ix + dx
                corner[3 * k + 1] = iy + dy
                corner[3 * k + 2] = iz + dz
                sigma[0] += w[k] * dens[ix + dx, iy + dy, iz + dz]
                c[0] += w[k] * col[ix + dx, iy + dy, iz + dz, 0]
                c[1] += w[k] * col[ix + dx, iy + dy, iz + dz, 1]
                c[2] += w[k] * col[ix + dx, iy + dy, iz + dz, 2]
                k += 1


def render_forward(const double[:, :, ::1] dens, const double[:, :, :, ::1] col,
                   const double[::1] lo, const double[::1] hi,
                   const double[:, ::1] origins, const double[:, ::1] dirs,
                   const double[::1] t0, const double[::1] t1, const double[:, ::1] jitter,
                   const double[::1] bg, const double[::1] far):
    cdef Py_ssize_t nr = origins.shape[0]
    cdef int ns = jitter.shape[1]
    cdef int n = dens.shape[0]
    rgb_a = np.empty((nr, 3))
    depth_a = np.empty(nr)
    opac_a = np.empty(nr)
    cdef double[:, ::1] rgb = rgb_a
    cdef double[::1] depth = depth_a
    cdef double[::1] opac = opac_a
    cdef Py_ssize_t r
    cdef int i
    cdef double delta, t, trans, alpha, wgt, sigma, d
    cdef double c[3]
    cdef double acc[3]
    cdef double w8[8]
    cdef int corner[24]
    with nogil:
        for r in range(nr):
            acc[0] = 0.0
            acc[1] = 0.0
            acc[2] = 0.0
            trans = 1.0
            d = 0.0
            if t1[r] > t0[r]:
                delta = (t1[r] - t0[r]) / ns
                for i in range(ns):
                    t = t0[r] + (i + jitter[r, i]) * delta
                    _sample(dens, col, lo, hi, n,
                            origins[r, 0] + t * dirs[r, 0], origins[r, 1] + t * dirs[r, 1],
                            origins[r, 2] + t * dirs[r, 2], &sigma, c, corner, w8)
                    alpha = 1.0 - exp(-sigma * delta)
                    wgt = trans * alpha
                    acc[0] += wgt * c[0]
                    acc[1] += wgt * c[1]
                    acc[2] += wgt * c[2]
                    d += wgt * t
                    trans = trans * (1.0 - alpha)
            rgb[r, 0] = acc[0] + trans * bg[0]
            rgb[r, 1] = acc[1] + trans * bg[1]
            rgb[r, 2] = acc[2] + trans * bg[2]
            depth[r] = d + trans * far[r]
            opac[r] = 1.0 - trans
    return rgb_a, depth_a, opac_a


def render_backward(const double[:, :, ::1] dens, const double[:, :, :, ::1] col,
                    const double[::1] lo, const double[::1] hi,
                    const double[:, ::1] origins, const double[:, ::1] dirs,
                    const double[::1] t0, const double[::1] t1, const double[:, ::1] jitter,
                    const double[::1] bg, const double[::1] far, const double[:, ::1] g_rgb):
    cdef Py_ssize_t nr = origins.shape[0]
    cdef int ns = jitter.shape[1]
    cdef int n = dens.shape[0]
    gd_a = np.zeros((n, n, n))
    gc_a = np.zeros((n, n, n, 3))
    cdef double[:, :, ::1] gd = gd_a
    cdef double[:, :, :, ::1] gc = gc_a
    sig_a = np.empty(ns)
    tb_a = np.empty(ns)
    al_a = np.empty(ns)
    cs_a = np.empty((ns, 3))
    cdef double[::1] sig_s = sig_a
    cdef double[::1] tb_s = tb_a
    cdef double[::1] al_s = al_a
    cdef double[:, ::1] c_s = cs_a
    cdef Py_ssize_t r
    cdef int i, k, ch
    cdef double delta, t, trans, alpha, wgt, sigma, gs, tnext
    cdef double c[3]
    cdef double total[3]
    cdef double acc[3]
    cdef double w8[8]
    cdef int corner[24]
    with nogil:
        for r in range(nr):
            if not t1[r] > t0[r]:
                continue
            delta = (t1[r] - t0[r]) / ns
            trans = 1.0
            total[0] = 0.0
            total[1] = 0.0
            total[2] = 0.0
            for i in range(ns):
                t = t0[r] + (i + jitter[r, i]) * delta
                _sample(dens, col, lo, hi, n,
                        origins[r, 0] + t * dirs[r, 0], origins[r, 1] + t * dirs[r, 1],
                        origins[r, 2] + t * dirs[r, 2], &sigma, c, corner, w8)
                alpha = 1.0 - exp(-sigma * delta)
                sig_s[i] = sigma
                tb_s[i] = trans
                al_s[i] = alpha
                for ch in range(3):
                    c_s[i, ch] = c[ch]
                    total[ch] += trans * alpha * c[ch]
                trans = trans * (1.0 - alpha)
            for ch in range(3):
                total[ch] += trans * bg[ch]
                acc[ch] = 0.0
            for i in range(ns):
                t = t0[r] + (i + jitter[r, i]) * delta
                # recompute corners; cheaper than storing 8 of them per sample
                _sample(dens, col, lo, hi, n,
                        origins[r, 0] + t * dirs[r, 0], origins[r, 1] + t * dirs[r, 1],
                        origins[r, 2] + t * dirs[r, 2], &sigma, c, corner, w8)
                wgt = tb_s[i] * al_s[i]
                tnext = tb_s[i] * (1.0 - al_s[i])
                gs = 0.0
                for ch in range(3):
                    acc[ch] += wgt * c_s[i, ch]
                    gs += g_rgb[r, ch] * (tnext * c_s[i, ch] - (total[ch] - acc[ch]))
                gs *= delta
                for k in range(8):
                    gd[corner[3 * k], corner[3 * k + 1], corner[3 * k + 2]] += gs * w8[k]
                    for ch in range(3):
                        gc[corner[3 * k], corner[3 * k + 1], corner[3 * k + 2], ch] += wgt * g_rgb[r, ch] * w8[k]
    return gd_a, gc_a


def splat_zbuffer(const cnp.int64_t[::1] px, const cnp.int64_t[::1] py, const double[::1] z,
                  const double[:, ::1] colors, int height, int width):
    cdef Py_ssize_t npts = px.shape[0]
    cdef int nch = colors.shape[1]
    img_a = np.zeros((nch, height, width))
    zbuf_a = np.full((height, width), np.inf)
    mask_a = np.zeros((height, width), dtype=np.uint8)
    owner_a = np.full((height, width), -1, dtype=np.int64)
    cdef double[:, ::1] zbuf = zbuf_a
    cdef cnp.int64_t[:, ::1] owner = owner_a
    cdef double[:, :, ::1] img = img_a
    cdef cnp.uint8_t[:, ::1] mask = mask_a
    cdef Py_ssize_t p
    cdef cnp.int64_t x, y, q
    cdef int ch
    with nogil:
        for p in range(npts):
            x = px[p]
            y = py[p]
            if x < 0 or x >= width or y < 0 or y >= height or not z[p] > 0:
                continue
            if z[p] < zbuf[y, x]:
                zbuf[y, x] = z[p]
                owner[y, x] = p
        for y in range(height):
            for x in range(width):
                q = owner[y, x]
                if q >= 0:
                    mask[y, x] = 1
                    for ch in range(nch):
                        img[ch, y, x] = colors[q, ch]
    return img_a, zbuf_a, mask_a.astype(bool)
