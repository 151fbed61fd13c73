# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core. Mirrors fallback.py semantics exactly; see that
module's docstring for the shared contract."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, floor, INFINITY

cnp.import_array()


def rasterize_forward(double[:, ::1] means2d, double[:, ::1] conics,
                      double[::1] opacities, double[::1] lums,
                      int[::1] tile_ids, long[::1] tile_ranges,
                      int n_tiles_x, int height, int width, int tile_size,
                      double cutoff_power, double stop_t):
    image_arr = np.zeros((height, width), dtype=np.float64)
    final_t_arr = np.ones((height, width), dtype=np.float64)
    n_contrib_arr = np.zeros((height, width), dtype=np.int32)
    cdef double[:, ::1] image = image_arr
    cdef double[:, ::1] final_t = final_t_arr
    cdef int[:, ::1] n_contrib = n_contrib_arr

    cdef int n_tiles_y = (height + tile_size - 1) // tile_size
    cdef int ty, tx, y0, y1, x0, x1, iy, ix, s, n
    cdef long tile, r0, r1, j
    cdef double px, py, dx, dy, power, alpha, t, c
    cdef double a, bb, cc, op, lu

    for ty in range(n_tiles_y):
        y0 = ty * tile_size
        y1 = min(y0 + tile_size, height)
        for tx in range(n_tiles_x):
            tile = <long> ty * n_tiles_x + tx
            r0 = tile_ranges[tile]
            r1 = tile_ranges[tile + 1]
            if r0 == r1:
                continue
            x0 = tx * tile_size
            x1 = min(x0 + tile_size, width)
            for iy in range(y0, y1):
                py = iy
                for ix in range(x0, x1):
                    px = ix
                    t = 1.0
                    c = 0.0
                    n = 0
                    for j in range(r0, r1):
                        s = tile_ids[j]
                        n = <int> (j - r0 + 1)
                        dx = px - means2d[s, 0]
                        dy = py - means2d[s, 1]
                        a = conics[s, 0]
                        bb = conics[s, 1]
                        cc = conics[s, 2]
                        power = -0.5 * (a * dx * dx + cc * dy * dy) - bb * dx * dy
                        if power < -cutoff_power:
                            continue
                        alpha = opacities[s] * exp(power)
                        if alpha > 0.99:
                            alpha = 0.99
                        c = c + lums[s] * alpha * t
                        t = t * (1.0 - alpha)
                        if t < stop_t:
                            break
                    image[iy, ix] = c
                    final_t[iy, ix] = t
                    n_contrib[iy, ix] = n
    return image_arr, final_t_arr, n_contrib_arr


def rasterize_backward(double[:, ::1] means2d, double[:, ::1] conics,
                       double[::1] opacities, double[::1] lums,
                       int[::1] tile_ids, long[::1] tile_ranges,
                       int n_tiles_x, int height, int width, int tile_size,
                       double cutoff_power,
                       double[:, ::1] final_t, int[:, ::1] n_contrib,
                       double[:, ::1] dl_dpix):
    cdef Py_ssize_t m_count = means2d.shape[0]
    d_mean_arr = np.zeros((m_count, 2), dtype=np.float64)
    d_conic_arr = np.zeros((m_count, 3), dtype=np.float64)
    d_opac_arr = np.zeros(m_count, dtype=np.float64)
    d_lum_arr = np.zeros(m_count, dtype=np.float64)
    cdef double[:, ::1] d_mean = d_mean_arr
    cdef double[:, ::1] d_conic = d_conic_arr
    cdef double[::1] d_opac = d_opac_arr
    cdef double[::1] d_lum = d_lum_arr

    cdef int n_tiles_y = (height + tile_size - 1) // tile_size
    cdef int ty, tx, y0, y1, x0, x1, iy, ix, s
    cdef long tile, r0, r1, j
    cdef double px, py, dx, dy, power, g, alpha_raw, alpha, t_cur, t_next
    cdef double w, dlp, d_alpha, d_power, gx, gy
    cdef double a, bb, cc, op, lu
    cdef bint clamped

    for ty in range(n_tiles_y):
        y0 = ty * tile_size
        y1 = min(y0 + tile_size, height)
        for tx in range(n_tiles_x):
            tile = <long> ty * n_tiles_x + tx
            r0 = tile_ranges[tile]
            r1 = tile_ranges[tile + 1]
            if r0 == r1:
                continue
            x0 = tx * tile_size
            x1 = min(x0 + tile_size, width)
            for iy in range(y0, y1):
                py = iy
                for ix in range(x0, x1):
                    dlp = dl_dpix[iy, ix]
                    if dlp == 0.0:
                        continue
                    px = ix
                    t_next = final_t[iy, ix]
                    w = 0.0
                    for j in range(r0 + n_contrib[iy, ix] - 1, r0 - 1, -1):
                        s = tile_ids[j]
                        dx = px - means2d[s, 0]
                        dy = py - means2d[s, 1]
                        a = conics[s, 0]
                        bb = conics[s, 1]
                        cc = conics[s, 2]
                        power = -0.5 * (a * dx * dx + cc * dy * dy) - bb * dx * dy
                        if power < -cutoff_power:
                            continue
                        g = exp(power)
                        op = opacities[s]
                        lu = lums[s]
                        alpha_raw = op * g
                        clamped = alpha_raw > 0.99
                        alpha = 0.99 if clamped else alpha_raw
                        t_cur = t_next / (1.0 - alpha)
                        d_lum[s] += dlp * alpha * t_cur
                        d_alpha = dlp * (lu * t_cur - w / (1.0 - alpha))
                        w = w + lu * alpha * t_cur
                        t_next = t_cur
                        if not clamped:
                            d_opac[s] += d_alpha * g
                            d_power = d_alpha * op * g
                            gx = a * dx + bb * dy
                            gy = bb * dx + cc * dy
                            d_mean[s, 0] += d_power * gx
                            d_mean[s, 1] += d_power * gy
                            d_conic[s, 0] += d_power * (-0.5 * dx * dx)
                            d_conic[s, 1] += d_power * (-dx * dy)
                            d_conic[s, 2] += d_power * (-0.5 * dy * dy)
    return d_mean_arr, d_conic_arr, d_opac_arr, d_lum_arr


cdef inline bint _clip_slab(double* o, double* d, double* bmin, double* bmax,
                            double* t0_out, double* t1_out) noexcept nogil:
    cdef double t0 = 0.0
    cdef double t1 = INFINITY
    cdef double ta, tb, tmp
    cdef int ax
    for ax in range(3):
        if d[ax] == 0.0:
            if o[ax] < bmin[ax] or o[ax] > bmax[ax]:
                return False
            continue
        ta = (bmin[ax] - o[ax]) / d[ax]
        tb = (bmax[ax] - o[ax]) / d[ax]
        if ta > tb:
            tmp = ta
            ta = tb
            tb = tmp
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if t1 <= t0:
        return False
    t0_out[0] = t0
    t1_out[0] = t1
    return True


cdef long _traverse_one(double* o, double* d, double* bmin, double* pitch,
                        long* dims, long* out_cols, double* out_lens) noexcept nogil:
    """DDA for one ray into caller scratch; returns the entry count."""
    cdef double bmax[3]
    cdef double t_max[3]
    cdef double t_delta[3]
    cdef long idx[3]
    cdef long step[3]
    cdef double t0, t1, t, t_next, p
    cdef long i, count, sy, sx
    cdef int ax

    for ax in range(3):
        bmax[ax] = bmin[ax] + pitch[ax] * dims[ax]
    if not _clip_slab(o, d, bmin, bmax, &t0, &t1):
        return 0
    for ax in range(3):
        p = o[ax] + t0 * d[ax]
        i = <long> floor((p - bmin[ax]) / pitch[ax])
        if i < 0:
            i = 0
        if i > dims[ax] - 1:
            i = dims[ax] - 1
        idx[ax] = i
        if d[ax] > 0:
            step[ax] = 1
            t_max[ax] = t0 + (bmin[ax] + (i + 1) * pitch[ax] - p) / d[ax]
            t_delta[ax] = pitch[ax] / d[ax]
        elif d[ax] < 0:
            step[ax] = -1
            t_max[ax] = t0 + (bmin[ax] + i * pitch[ax] - p) / d[ax]
            t_delta[ax] = -pitch[ax] / d[ax]
        else:
            step[ax] = 0
            t_max[ax] = INFINITY
            t_delta[ax] = INFINITY
    count = 0
    t = t0
    sy = dims[2]
    sx = dims[1] * dims[2]
    while True:
        ax = 0
        if t_max[1] < t_max[ax]:
            ax = 1
        if t_max[2] < t_max[ax]:
            ax = 2
        t_next = t_max[ax]
        if t1 < t_next:
            t_next = t1
        if t_next > t:
            out_cols[count] = idx[0] * sx + idx[1] * sy + idx[2]
            out_lens[count] = t_next - t
            count += 1
        if t_max[ax] >= t1:
            break
        idx[ax] += step[ax]
        if idx[ax] < 0 or idx[ax] >= dims[ax]:
            break
        t = t_next
        t_max[ax] += t_delta[ax]
    return count


def traverse_rays(origins, directions, bbox_min, pitch, dims):
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    directions = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    if origins.shape[0] == 1 and directions.shape[0] > 1:
        origins = np.ascontiguousarray(np.broadcast_to(origins, directions.shape))
    bmin_arr = np.ascontiguousarray(bbox_min, dtype=np.float64)
    pitch_arr = np.ascontiguousarray(pitch, dtype=np.float64)
    dims_arr = np.ascontiguousarray(dims, dtype=np.int64)

    cdef double[:, ::1] o_mv = origins
    cdef double[:, ::1] d_mv = directions
    cdef double[::1] bmin = bmin_arr
    cdef double[::1] pv = pitch_arr
    cdef long[::1] dv = dims_arr
    cdef long n = d_mv.shape[0]
    cdef long max_steps = dv[0] + dv[1] + dv[2] + 3

    row_ptr_arr = np.zeros(n + 1, dtype=np.int64)
    cdef long[::1] row_ptr = row_ptr_arr
    cdef long cap = max(1024, n * 8)
    cols_arr = np.empty(cap, dtype=np.int64)
    lens_arr = np.empty(cap, dtype=np.float64)
    scratch_cols_arr = np.empty(max_steps, dtype=np.int64)
    scratch_lens_arr = np.empty(max_steps, dtype=np.float64)
    cdef long[::1] scratch_cols = scratch_cols_arr
    cdef double[::1] scratch_lens = scratch_lens_arr

    cdef long total = 0
    cdef long r, k, cnt
    cdef long[::1] cols_mv = cols_arr
    cdef double[::1] lens_mv = lens_arr
    for r in range(n):
        cnt = _traverse_one(&o_mv[r, 0], &d_mv[r, 0], &bmin[0], &pv[0], &dv[0],
                            &scratch_cols[0], &scratch_lens[0])
        if total + cnt > cap:
            cap = max(cap * 2, total + cnt)
            cols_arr = np.resize(cols_arr, cap)
            lens_arr = np.resize(lens_arr, cap)
            cols_mv = cols_arr
            lens_mv = lens_arr
        for k in range(cnt):
            cols_mv[total + k] = scratch_cols[k]
            lens_mv[total + k] = scratch_lens[k]
        total += cnt
        row_ptr[r + 1] = total
    return row_ptr_arr, cols_arr[:total].copy(), lens_arr[:total].copy()


def carve_rays(origin, directions, bbox_min, pitch, dims, view_bit, hit_mask):
    origin_arr = np.ascontiguousarray(origin, dtype=np.float64)
    directions = np.ascontiguousarray(directions, dtype=np.float64)
    bmin_arr = np.ascontiguousarray(bbox_min, dtype=np.float64)
    pitch_arr = np.ascontiguousarray(pitch, dtype=np.float64)
    dims_arr = np.ascontiguousarray(dims, dtype=np.int64)

    cdef double[::1] o_mv = origin_arr
    cdef double[:, ::1] d_mv = directions
    cdef double[::1] bmin = bmin_arr
    cdef double[::1] pv = pitch_arr
    cdef long[::1] dv = dims_arr
    cdef cnp.uint64_t[::1] mask = hit_mask
    cdef cnp.uint64_t bit = (<cnp.uint64_t> 1) << (<cnp.uint64_t> view_bit)
    cdef long max_steps = dv[0] + dv[1] + dv[2] + 3

    scratch_cols_arr = np.empty(max_steps, dtype=np.int64)
    scratch_lens_arr = np.empty(max_steps, dtype=np.float64)
    cdef long[::1] scratch_cols = scratch_cols_arr
    cdef double[::1] scratch_lens = scratch_lens_arr
    cdef long r, k, cnt
    for r in range(d_mv.shape[0]):
        cnt = _traverse_one(&o_mv[0], &d_mv[r, 0], &bmin[0], &pv[0], &dv[0],
                            &scratch_cols[0], &scratch_lens[0])
        for k in range(cnt):
            mask[scratch_cols[k]] |= bit


def art_sweep(double[::1] values, double[::1] b, long[::1] row_ptr,
              long[::1] cols, double[::1] lens, double relaxation):
    cdef long r, k, lo, hi
    cdef double wn, wx, f, v
    for r in range(b.shape[0]):
        lo = row_ptr[r]
        hi = row_ptr[r + 1]
        if lo == hi:
            continue
        wn = 0.0
        wx = 0.0
        for k in range(lo, hi):
            wn += lens[k] * lens[k]
            wx += lens[k] * values[cols[k]]
        if wn == 0.0:
            continue
        f = relaxation * (b[r] - wx) / wn
        for k in range(lo, hi):
            v = values[cols[k]] + f * lens[k]
            values[cols[k]] = v if v > 0.0 else 0.0
