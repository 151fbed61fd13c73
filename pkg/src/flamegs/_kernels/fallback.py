"""Pure-NumPy kernel implementations (fallback backend).

Semantics contract shared with the compiled core:

- rasterization is pixel-major within 16x16-ish tiles, front-to-back in the
  supplied splat order; a pixel skips a splat when its Gaussian exponent
  falls below -cutoff_power, clamps alpha at 0.99, and stops once its
  transmittance drops below stop_t (the splat that crossed the threshold is
  still blended);
- n_contrib counts tile-list entries *visited* by a pixel (including skipped
  ones) so the backward pass can replay exactly the forward range;
- ray-grid traversal enumerates voxels with Amanatides-Woo stepping after a
  parametric slab clip, axis priority x < y < z on ties, and never records
  zero-length segments.
"""

from __future__ import annotations

import numpy as np


def rasterize_forward(means2d, conics, opacities, lums, tile_ids, tile_ranges,
                      n_tiles_x, height, width, tile_size, cutoff_power, stop_t):
    """Front-to-back alpha blending. Returns (image, final_T, n_contrib)."""
    image = np.zeros((height, width), dtype=np.float64)
    final_t = np.ones((height, width), dtype=np.float64)
    n_contrib = np.zeros((height, width), dtype=np.int32)
    n_tiles_y = (height + tile_size - 1) // tile_size

    mx, my = means2d[:, 0], means2d[:, 1]
    ca, cb, cc = conics[:, 0], conics[:, 1], conics[:, 2]

    for ty in range(n_tiles_y):
        y0, y1 = ty * tile_size, min((ty + 1) * tile_size, height)
        for tx in range(n_tiles_x):
            tile = ty * n_tiles_x + tx
            r0, r1 = tile_ranges[tile], tile_ranges[tile + 1]
            if r0 == r1:
                continue
            x0, x1 = tx * tile_size, min((tx + 1) * tile_size, width)
            py, px = np.mgrid[y0:y1, x0:x1]
            px = px.astype(np.float64).ravel()
            py = py.astype(np.float64).ravel()
            t = np.ones(px.shape[0], dtype=np.float64)
            c = np.zeros(px.shape[0], dtype=np.float64)
            n = np.zeros(px.shape[0], dtype=np.int32)
            active = np.ones(px.shape[0], dtype=bool)
            for j in range(r0, r1):
                s = tile_ids[j]
                n[active] = j - r0 + 1
                dx = px - mx[s]
                dy = py - my[s]
                power = -0.5 * (ca[s] * dx * dx + cc[s] * dy * dy) - cb[s] * dx * dy
                m = active & (power >= -cutoff_power)
                if m.any():
                    alpha = np.minimum(0.99, opacities[s] * np.exp(power[m]))
                    c[m] += lums[s] * alpha * t[m]
                    t[m] = t[m] * (1.0 - alpha)
                    active &= t >= stop_t
                if not active.any():
                    break
            sh = (y1 - y0, x1 - x0)
            image[y0:y1, x0:x1] = c.reshape(sh)
            final_t[y0:y1, x0:x1] = t.reshape(sh)
            n_contrib[y0:y1, x0:x1] = n.reshape(sh)
    return image, final_t, n_contrib


def rasterize_backward(means2d, conics, opacities, lums, tile_ids, tile_ranges,
                       n_tiles_x, height, width, tile_size, cutoff_power,
                       final_t, n_contrib, dl_dpix):
    """Adjoint of rasterize_forward.

    Returns per-splat gradients (d_mean2d, d_conic, d_opacity, d_lum); the
    conic gradient is wrt the unique entries (a, b, c) of the inverse 2D
    covariance [[a, b], [b, c]].
    """
    m_count = means2d.shape[0]
    d_mean = np.zeros((m_count, 2), dtype=np.float64)
    d_conic = np.zeros((m_count, 3), dtype=np.float64)
    d_opac = np.zeros(m_count, dtype=np.float64)
    d_lum = np.zeros(m_count, dtype=np.float64)
    n_tiles_y = (height + tile_size - 1) // tile_size

    mx, my = means2d[:, 0], means2d[:, 1]
    ca, cb, cc = conics[:, 0], conics[:, 1], conics[:, 2]

    for ty in range(n_tiles_y):
        y0, y1 = ty * tile_size, min((ty + 1) * tile_size, height)
        for tx in range(n_tiles_x):
            tile = ty * n_tiles_x + tx
            r0, r1 = tile_ranges[tile], tile_ranges[tile + 1]
            if r0 == r1:
                continue
            x0, x1 = tx * tile_size, min((tx + 1) * tile_size, width)
            py, px = np.mgrid[y0:y1, x0:x1]
            px = px.astype(np.float64).ravel()
            py = py.astype(np.float64).ravel()
            dlp = dl_dpix[y0:y1, x0:x1].ravel().astype(np.float64)
            nloc = n_contrib[y0:y1, x0:x1].ravel()
            live = dlp != 0.0
            if not live.any():
                continue
            t_next = final_t[y0:y1, x0:x1].ravel().copy()
            w = np.zeros(px.shape[0], dtype=np.float64)
            for j in range(int(nloc.max()) - 1, -1, -1):
                s = tile_ids[r0 + j]
                vis = live & (j < nloc)
                if not vis.any():
                    continue
                dx = px - mx[s]
                dy = py - my[s]
                power = -0.5 * (ca[s] * dx * dx + cc[s] * dy * dy) - cb[s] * dx * dy
                m = vis & (power >= -cutoff_power)
                if not m.any():
                    continue
                g = np.exp(power[m])
                alpha_raw = opacities[s] * g
                clamped = alpha_raw > 0.99
                alpha = np.where(clamped, 0.99, alpha_raw)
                t_cur = t_next[m] / (1.0 - alpha)
                dlpm = dlp[m]
                d_lum[s] += np.sum(dlpm * alpha * t_cur)
                d_alpha = dlpm * (lums[s] * t_cur - w[m] / (1.0 - alpha))
                w[m] += lums[s] * alpha * t_cur
                t_next[m] = t_cur
                open_ = ~clamped
                if open_.any():
                    da = d_alpha[open_]
                    go = g[open_]
                    d_opac[s] += np.sum(da * go)
                    d_power = da * opacities[s] * go
                    dxo = dx[m][open_]
                    dyo = dy[m][open_]
                    gx = ca[s] * dxo + cb[s] * dyo
                    gy = cb[s] * dxo + cc[s] * dyo
                    d_mean[s, 0] += np.sum(d_power * gx)
                    d_mean[s, 1] += np.sum(d_power * gy)
                    d_conic[s, 0] += np.sum(d_power * (-0.5 * dxo * dxo))
                    d_conic[s, 1] += np.sum(d_power * (-dxo * dyo))
                    d_conic[s, 2] += np.sum(d_power * (-0.5 * dyo * dyo))
    return d_mean, d_conic, d_opac, d_lum


def _clip_slab(origin, direction, bbox_min, bbox_max):
    """Parametric entry/exit of a forward ray against an AABB, or None."""
    t0, t1 = 0.0, np.inf
    for ax in range(3):
        o, d = origin[ax], direction[ax]
        if d == 0.0:
            if o < bbox_min[ax] or o > bbox_max[ax]:
                return None
            continue
        ta = (bbox_min[ax] - o) / d
        tb = (bbox_max[ax] - o) / d
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    if t1 <= t0:
        return None
    return t0, t1


def _traverse_one(origin, direction, bbox_min, pitch, dims):
    """Single-ray DDA: yields (flat voxel index, segment length) pairs."""
    bbox_max = bbox_min + pitch * dims
    clip = _clip_slab(origin, direction, bbox_min, bbox_max)
    if clip is None:
        return [], []
    t0, t1 = clip
    p = origin + t0 * direction
    idx = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    t_max = np.empty(3, dtype=np.float64)
    t_delta = np.empty(3, dtype=np.float64)
    for ax in range(3):
        i = int(np.floor((p[ax] - bbox_min[ax]) / pitch[ax]))
        idx[ax] = min(max(i, 0), dims[ax] - 1)
        d = direction[ax]
        if d > 0:
            step[ax] = 1
            t_max[ax] = t0 + (bbox_min[ax] + (idx[ax] + 1) * pitch[ax] - p[ax]) / d
            t_delta[ax] = pitch[ax] / d
        elif d < 0:
            step[ax] = -1
            t_max[ax] = t0 + (bbox_min[ax] + idx[ax] * pitch[ax] - p[ax]) / d
            t_delta[ax] = -pitch[ax] / d
        else:
            step[ax] = 0
            t_max[ax] = np.inf
            t_delta[ax] = np.inf
    cols, lens = [], []
    t = t0
    sy = dims[2]
    sx = dims[1] * dims[2]
    while True:
        ax = 0
        if t_max[1] < t_max[ax]:
            ax = 1
        if t_max[2] < t_max[ax]:
            ax = 2
        t_next = min(t_max[ax], t1)
        if t_next > t:
            cols.append(idx[0] * sx + idx[1] * sy + idx[2])
            lens.append(t_next - t)
        if t_max[ax] >= t1:
            break
        idx[ax] += step[ax]
        if idx[ax] < 0 or idx[ax] >= dims[ax]:
            break
        t = t_next
        t_max[ax] += t_delta[ax]
    return cols, lens


def traverse_rays(origins, directions, bbox_min, pitch, dims):
    """Weight rows for many rays: (row_ptr, voxel columns, path lengths).

    Voxel flat index is x-major: flat = ix * ny * nz + iy * nz + iz.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if origins.shape[0] == 1 and directions.shape[0] > 1:
        origins = np.broadcast_to(origins, directions.shape)
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.int64)
    n = directions.shape[0]
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    all_cols, all_lens = [], []
    for r in range(n):
        cols, lens = _traverse_one(origins[r], directions[r], bbox_min, pitch, dims)
        all_cols.extend(cols)
        all_lens.extend(lens)
        row_ptr[r + 1] = len(all_cols)
    return row_ptr, np.asarray(all_cols, dtype=np.int64), np.asarray(all_lens, dtype=np.float64)


def carve_rays(origin, directions, bbox_min, pitch, dims, view_bit, hit_mask):
    """OR one camera's bit into every voxel pierced by each ray (in place)."""
    origin = np.asarray(origin, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.int64)
    bit = np.uint64(1) << np.uint64(view_bit)
    for r in range(directions.shape[0]):
        cols, _ = _traverse_one(origin, directions[r], bbox_min, pitch, dims)
        if cols:
            hit_mask[np.asarray(cols, dtype=np.int64)] |= bit


def art_sweep(values, b, row_ptr, cols, lens, relaxation):
    """One Kaczmarz sweep over all rays in ascending id order, in place.

    Each update is followed by a non-negativity clamp on the touched voxels.
    Zero-norm rows are skipped.
    """
    for r in range(b.shape[0]):
        lo, hi = row_ptr[r], row_ptr[r + 1]
        if lo == hi:
            continue
        idx = cols[lo:hi]
        w = lens[lo:hi]
        wn = float(w @ w)
        if wn == 0.0:
            continue
        x = values[idx]
        f = relaxation * (float(b[r]) - float(x @ w)) / wn
        np.maximum(x + f * w, 0.0, out=x)
        values[idx] = x
