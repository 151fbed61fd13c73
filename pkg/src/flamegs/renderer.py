"""Differentiable splatting renderer.

Forward: project each Gaussian's mean and covariance to a view, sort by
depth, and alpha-blend per pixel front to back. Backward: exact adjoint of
that computation, chaining pixel gradients through the blending, the affine
covariance projection (including the Jacobian's dependence on the camera
point), the scale/quaternion factorization, the spherical harmonics, and the
pose delta.

Everything is pixel-major over 16x16 tiles; the per-pixel hot loops live in
flamegs._kernels. Gradient reduction order is fixed, so results do not
depend on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .camera import (
    COV2D_FLOOR,
    Z_NEAR,
    CameraView,
    Pose,
    axis_angle_to_matrix,
    so3_right_jacobian,
)
from .model import (
    GaussianSet,
    quaternion_matrix_partials,
    sh_basis,
    sh_basis_gradient,
    sigmoid,
)

CULL_SIGMA = 3.0  # image-rectangle overlap test radius, in Mahalanobis units


@dataclass
class RenderSettings:
    tile_size: int = 16
    cutoff_sigma: float = 3.5        # per-pixel evaluation/binning cutoff
    stop_transmittance: float = 1e-4  # early stop; 0 disables

    @property
    def cutoff_power(self) -> float:
        return 0.5 * self.cutoff_sigma * self.cutoff_sigma


@dataclass
class Splat2D:
    """Screen-space footprint of one Gaussian in one view."""

    mean2d: np.ndarray      # (2,) pixels
    inv_cov2d: np.ndarray   # (2, 2) inverse of the floored screen covariance
    depth: float
    opacity: float
    luminance: float
    source_index: int


class SplatBatch:
    """Packed per-view splats plus the forward intermediates the backward
    pass needs. Sequence of Splat2D for contract purposes."""

    def __init__(self, **arrays):
        self.__dict__.update(arrays)

    def __len__(self):
        return self.mean2d.shape[0]

    def __getitem__(self, i: int) -> Splat2D:
        a, b, c = self.conic[i]
        return Splat2D(
            mean2d=self.mean2d[i].copy(),
            inv_cov2d=np.array([[a, b], [b, c]]),
            depth=float(self.depth[i]),
            opacity=float(self.opacity[i]),
            luminance=float(self.luminance[i]),
            source_index=int(self.source_index[i]),
        )

    def permuted(self, order) -> "SplatBatch":
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v[order] if isinstance(v, np.ndarray) and v.shape[:1] == (len(self),) else v
        return SplatBatch(**out)


@dataclass
class FrameBuffer:
    pixels: np.ndarray          # (H, W), uncapped accumulation
    transmittance: np.ndarray   # (H, W), terminal per-pixel transmittance
    ctx: "RenderContext | None" = None


@dataclass
class RenderContext:
    batch: SplatBatch
    tile_ids: np.ndarray
    tile_ranges: np.ndarray
    n_tiles_x: int
    n_contrib: np.ndarray
    settings: RenderSettings
    pose: Pose


@dataclass
class GradientBuffer:
    d_positions: np.ndarray       # (N, 3)
    d_log_scales: np.ndarray      # (N, 3)
    d_rotations: np.ndarray       # (N, 4)
    d_opacity_logits: np.ndarray  # (N,)
    d_sh_coeffs: np.ndarray       # (N, K)
    d_delta_rot: np.ndarray       # (3,)
    d_delta_t: np.ndarray         # (3,)
    screen_grad_norm: np.ndarray  # (N,) |dL/dmean2d| per Gaussian, 0 if culled
    visible: np.ndarray           # (N,) bool


def _ellipse_rect_overlap(mean2d, conic, width, height, radius):
    """Vectorized exact test: does {d^T A d <= radius^2} around each mean
    intersect the pixel rectangle [0, W-1] x [0, H-1]?

    Convex quadratic minimized over the rectangle: zero inside, else the
    minimum lies on one of the four edges (closed-form 1D minimization).
    """
    mx, my = mean2d[:, 0], mean2d[:, 1]
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    x0, x1 = 0.0, float(width - 1)
    y0, y1 = 0.0, float(height - 1)
    inside = (mx >= x0) & (mx <= x1) & (my >= y0) & (my <= y1)

    def quad(dx, dy):
        return a * dx * dx + 2.0 * b * dx * dy + c * dy * dy

    best = np.full(mx.shape, np.inf)
    for xe in (x0, x1):  # vertical edges: minimize over y
        dx = xe - mx
        dy = np.clip(-b * dx / c, y0 - my, y1 - my)
        best = np.minimum(best, quad(dx, dy))
    for ye in (y0, y1):  # horizontal edges: minimize over x
        dy = ye - my
        dx = np.clip(-b * dy / a, x0 - mx, x1 - mx)
        best = np.minimum(best, quad(dx, dy))
    return inside | (best <= radius * radius)


def cull_and_project(gset: GaussianSet, view: CameraView,
                     settings: RenderSettings | None = None) -> SplatBatch:
    """Project every Gaussian into the view, keeping those in front of the
    near plane whose 3-sigma screen ellipse overlaps the image rectangle.

    Returned splats are in source order; the batch carries the forward
    intermediates used by render_backward.
    """
    if len(gset) == 0:
        raise ValueError("cannot render an empty GaussianSet")
    if settings is None:
        settings = RenderSettings()
    pose = view.effective_pose()
    intr = view.intrinsics
    R = pose.R_c
    T = pose.T_c

    p_cam_all = gset.positions @ R.T + T
    front = p_cam_all[:, 2] > Z_NEAR
    idx0 = np.nonzero(front)[0]

    p_cam = p_cam_all[idx0]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    mean2d = np.stack([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy], axis=1)

    m = idx0.shape[0]
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * x / (z * z)
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * y / (z * z)

    rot_mats = np.zeros((m, 3, 3))
    scales = np.exp(gset.log_scales[idx0])
    q = gset.rotations[idx0]
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    w_, x_, y_, z_ = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    rot_mats[:, 0, 0] = 1 - 2 * (y_ * y_ + z_ * z_)
    rot_mats[:, 0, 1] = 2 * (x_ * y_ - w_ * z_)
    rot_mats[:, 0, 2] = 2 * (x_ * z_ + w_ * y_)
    rot_mats[:, 1, 0] = 2 * (x_ * y_ + w_ * z_)
    rot_mats[:, 1, 1] = 1 - 2 * (x_ * x_ + z_ * z_)
    rot_mats[:, 1, 2] = 2 * (y_ * z_ - w_ * x_)
    rot_mats[:, 2, 0] = 2 * (x_ * z_ - w_ * y_)
    rot_mats[:, 2, 1] = 2 * (y_ * z_ + w_ * x_)
    rot_mats[:, 2, 2] = 1 - 2 * (x_ * x_ + y_ * y_)

    V = rot_mats * scales[:, None, :]
    cov3d = V @ np.swapaxes(V, 1, 2)
    m_cam = np.einsum("ab,nbc,dc->nad", R, cov3d, R)
    cov2d = np.einsum("nab,nbc,ndc->nad", J, m_cam, J)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.stack(
        [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1
    )

    keep = _ellipse_rect_overlap(mean2d, conic, intr.width, intr.height, CULL_SIGMA)
    sel = np.nonzero(keep)[0]
    idx = idx0[sel]

    cam_center = -R.T @ T
    u = gset.positions[idx] - cam_center
    u_norm = np.linalg.norm(u, axis=1)
    direction = u / u_norm[:, None]
    basis = sh_basis(direction, gset.sh_degree)
    sh = gset.sh_coeffs[idx]
    lum_raw = np.einsum("nk,nk->n", basis, sh)
    luminance = np.maximum(lum_raw, 0.0)
    opacity = sigmoid(gset.opacity_logits[idx])

    return SplatBatch(
        source_index=idx,
        mean2d=np.ascontiguousarray(mean2d[sel]),
        conic=np.ascontiguousarray(conic[sel]),
        depth=np.ascontiguousarray(z[sel]),
        opacity=np.ascontiguousarray(opacity),
        luminance=np.ascontiguousarray(luminance),
        cov2d=cov2d[sel],
        p_cam=p_cam[sel],
        jac=J[sel],
        m_cam=m_cam[sel],
        cov3d=cov3d[sel],
        v_fac=V[sel],
        rot_mats=rot_mats[sel],
        scales=scales[sel],
        q_unit=qn[sel],
        q_norm=np.linalg.norm(q[sel], axis=1),
        u_norm=u_norm,
        direction=direction,
        basis=basis,
        lum_raw=lum_raw,
        sh_degree=gset.sh_degree,
    )


def depth_sort(batch: SplatBatch) -> SplatBatch:
    """Ascending depth, ties broken by source index (stable, deterministic)."""
    order = np.lexsort((batch.source_index, batch.depth))
    return batch.permuted(order)


def _build_tile_lists(batch: SplatBatch, width, height, settings: RenderSettings):
    """Bin splats to the tiles their cutoff-sigma AABB touches.

    Returns (tile_ids int32, tile_ranges int64, n_tiles_x). tile_ids holds
    indices into the (sorted) batch, ascending within each tile.
    """
    ts = settings.tile_size
    k = settings.cutoff_sigma
    n_tiles_x = (width + ts - 1) // ts
    n_tiles_y = (height + ts - 1) // ts
    n_tiles = n_tiles_x * n_tiles_y

    mx, my = batch.mean2d[:, 0], batch.mean2d[:, 1]
    rx = k * np.sqrt(batch.cov2d[:, 0, 0])
    ry = k * np.sqrt(batch.cov2d[:, 1, 1])
    px_lo = np.maximum(np.ceil(mx - rx), 0).astype(np.int64)
    px_hi = np.minimum(np.floor(mx + rx), width - 1).astype(np.int64)
    py_lo = np.maximum(np.ceil(my - ry), 0).astype(np.int64)
    py_hi = np.minimum(np.floor(my + ry), height - 1).astype(np.int64)
    valid = (px_lo <= px_hi) & (py_lo <= py_hi)

    tx0 = np.where(valid, px_lo // ts, 0)
    tx1 = np.where(valid, px_hi // ts, -1)
    ty0 = np.where(valid, py_lo // ts, 0)
    ty1 = np.where(valid, py_hi // ts, -1)
    counts = np.where(valid, (tx1 - tx0 + 1) * (ty1 - ty0 + 1), 0)

    total = int(counts.sum())
    if total == 0:
        return (np.zeros(0, dtype=np.int32),
                np.zeros(n_tiles + 1, dtype=np.int64), n_tiles_x)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    splat_of_pair = np.repeat(np.arange(len(batch)), counts)
    ordinal = np.arange(total) - offsets[splat_of_pair]
    wspan = (tx1 - tx0 + 1)[splat_of_pair]
    tile = ((ty0[splat_of_pair] + ordinal // wspan) * n_tiles_x
            + tx0[splat_of_pair] + ordinal % wspan)

    order = np.lexsort((splat_of_pair, tile))
    tile_ids = splat_of_pair[order].astype(np.int32)
    per_tile = np.bincount(tile[order], minlength=n_tiles)
    tile_ranges = np.concatenate([[0], np.cumsum(per_tile)]).astype(np.int64)
    return tile_ids, tile_ranges, n_tiles_x


def render_forward(gset: GaussianSet, view: CameraView,
                   settings: RenderSettings | None = None) -> FrameBuffer:
    """Render the set into the view; keeps state for render_backward."""
    if settings is None:
        settings = RenderSettings()
    batch = depth_sort(cull_and_project(gset, view, settings))
    intr = view.intrinsics
    tile_ids, tile_ranges, n_tiles_x = _build_tile_lists(
        batch, intr.width, intr.height, settings
    )
    image, final_t, n_contrib = _kernels.rasterize_forward(
        batch.mean2d, batch.conic, batch.opacity, batch.luminance,
        tile_ids, tile_ranges, n_tiles_x, intr.height, intr.width,
        settings.tile_size, settings.cutoff_power, settings.stop_transmittance,
    )
    ctx = RenderContext(
        batch=batch, tile_ids=tile_ids, tile_ranges=tile_ranges,
        n_tiles_x=n_tiles_x, n_contrib=n_contrib, settings=settings,
        pose=view.effective_pose(),
    )
    return FrameBuffer(pixels=image, transmittance=final_t, ctx=ctx)


def render_backward(gset: GaussianSet, view: CameraView, dl_dpixels,
                    frame: FrameBuffer) -> GradientBuffer:
    """Gradients of sum(dl_dpixels * image) wrt every Gaussian parameter and
    the view's pose delta. Culled Gaussians get zeros."""
    ctx = frame.ctx
    if ctx is None:
        raise ValueError("FrameBuffer carries no forward state")
    b = ctx.batch
    intr = view.intrinsics
    dl_dpixels = np.ascontiguousarray(dl_dpixels, dtype=np.float64)

    d_mean2d, d_conic, d_opac, d_lum = _kernels.rasterize_backward(
        b.mean2d, b.conic, b.opacity, b.luminance,
        ctx.tile_ids, ctx.tile_ranges, ctx.n_tiles_x,
        intr.height, intr.width, ctx.settings.tile_size,
        ctx.settings.cutoff_power, frame.transmittance, ctx.n_contrib,
        dl_dpixels,
    )

    m = len(b)
    n = len(gset)
    k_sh = (gset.sh_degree + 1) ** 2
    out = GradientBuffer(
        d_positions=np.zeros((n, 3)),
        d_log_scales=np.zeros((n, 3)),
        d_rotations=np.zeros((n, 4)),
        d_opacity_logits=np.zeros(n),
        d_sh_coeffs=np.zeros((n, k_sh)),
        d_delta_rot=np.zeros(3),
        d_delta_t=np.zeros(3),
        screen_grad_norm=np.zeros(n),
        visible=np.zeros(n, dtype=bool),
    )
    out.visible[b.source_index] = True
    if m == 0:
        return out

    R = ctx.pose.R_c
    T = ctx.pose.T_c

    # conic (a, b, c) -> full-matrix gradient wrt the floored 2D covariance
    x_a = np.empty((m, 2, 2))
    x_a[:, 0, 0] = d_conic[:, 0]
    x_a[:, 0, 1] = x_a[:, 1, 0] = 0.5 * d_conic[:, 1]
    x_a[:, 1, 1] = d_conic[:, 2]
    a_mat = np.empty((m, 2, 2))
    a_mat[:, 0, 0] = b.conic[:, 0]
    a_mat[:, 0, 1] = a_mat[:, 1, 0] = b.conic[:, 1]
    a_mat[:, 1, 1] = b.conic[:, 2]
    g_cov2d = -np.einsum("nab,nbc,ncd->nad", a_mat, x_a, a_mat)

    # cov2d = J m_cam J^T (+ constant floor)
    g_mcam = np.einsum("nba,nbc,ncd->nad", b.jac, g_cov2d, b.jac)
    g_jac = np.einsum("nab,nbc,ncd->nad",
                      g_cov2d + np.swapaxes(g_cov2d, 1, 2), b.jac, b.m_cam)

    # J entries depend on the camera-frame point
    x, y, z = b.p_cam[:, 0], b.p_cam[:, 1], b.p_cam[:, 2]
    fx, fy = intr.fx, intr.fy
    z2 = z * z
    g_pcam = np.einsum("nba,nb->na", b.jac, d_mean2d)  # exact pinhole mean
    g_pcam[:, 0] += g_jac[:, 0, 2] * (-fx / z2)
    g_pcam[:, 1] += g_jac[:, 1, 2] * (-fy / z2)
    g_pcam[:, 2] += (g_jac[:, 0, 0] * (-fx / z2)
                     + g_jac[:, 1, 1] * (-fy / z2)
                     + g_jac[:, 0, 2] * (2.0 * fx * x / (z2 * z))
                     + g_jac[:, 1, 2] * (2.0 * fy * y / (z2 * z)))

    # m_cam = R cov3d R^T
    g_cov3d = np.einsum("ba,nbc,cd->nad", R, g_mcam, R)
    g_r_pose = np.einsum("nab,bc,ncd->ad",
                         g_mcam + np.swapaxes(g_mcam, 1, 2), R, b.cov3d)

    # cov3d = V V^T with V = R_q diag(s)
    g_v = np.einsum("nab,nbc->nac", g_cov3d + np.swapaxes(g_cov3d, 1, 2), b.v_fac)
    g_s = np.einsum("nij,nij->nj", g_v, b.rot_mats)
    g_log_scale = g_s * b.scales
    g_rq = g_v * b.scales[:, None, :]

    d_mats = quaternion_matrix_partials(b.q_unit)
    g_q_unit = np.einsum("nkij,nij->nk", d_mats, g_rq)
    g_q_raw = (g_q_unit
               - b.q_unit * np.einsum("nk,nk->n", b.q_unit, g_q_unit)[:, None])
    g_q_raw /= b.q_norm[:, None]

    # luminance: clamp at zero, SH basis, view direction normalization
    lum_open = b.lum_raw > 0.0
    g_lum_eff = np.where(lum_open, d_lum, 0.0)
    g_sh = g_lum_eff[:, None] * b.basis
    if gset.sh_degree > 0:
        basis_grad = sh_basis_gradient(b.direction, gset.sh_degree)
        sh = gset.sh_coeffs[b.source_index]
        g_dir = np.einsum("nk,nkd,n->nd", sh, basis_grad, g_lum_eff)
        g_u = (g_dir - b.direction
               * np.einsum("nd,nd->n", b.direction, g_dir)[:, None])
        g_u /= b.u_norm[:, None]
    else:
        g_u = np.zeros((m, 3))

    g_mu = g_pcam @ R + g_u
    g_o_total = -g_u.sum(axis=0)

    # opacity logit
    g_logit = d_opac * b.opacity * (1.0 - b.opacity)

    # pose chain: p_cam = R mu + T, camera center o = -R^T T
    g_r_pose += np.einsum("na,nb->ab", g_pcam, gset.positions[b.source_index])
    g_r_pose += -np.outer(T, g_o_total)
    g_t_pose = g_pcam.sum(axis=0) - R @ g_o_total

    delta = view.pose_delta
    delta_r_mat = axis_angle_to_matrix(delta.delta_rot)
    g_delta_r = view.pose.R_c.T @ g_r_pose
    m_ = delta_r_mat.T @ g_delta_r
    g_w = np.array([m_[2, 1] - m_[1, 2], m_[0, 2] - m_[2, 0], m_[1, 0] - m_[0, 1]])
    out.d_delta_rot = so3_right_jacobian(delta.delta_rot).T @ g_w
    out.d_delta_t = g_t_pose

    src = b.source_index
    np.add.at(out.d_positions, src, g_mu)
    np.add.at(out.d_log_scales, src, g_log_scale)
    np.add.at(out.d_rotations, src, g_q_raw)
    np.add.at(out.d_opacity_logits, src, g_logit)
    np.add.at(out.d_sh_coeffs, src, g_sh)
    np.add.at(out.screen_grad_norm, src, np.linalg.norm(d_mean2d, axis=1))

    for name in ("d_positions", "d_log_scales", "d_rotations",
                 "d_opacity_logits", "d_sh_coeffs", "d_delta_rot", "d_delta_t"):
        if not np.all(np.isfinite(getattr(out, name))):
            raise RuntimeError(f"non-finite gradient in {name}")
    return out


def write_pgm16(path, image):
    """Binary PGM (P5), 16-bit big-endian, values = round(clamp(v,0,1)*65535)."""
    img = np.asarray(image, dtype=np.float64)
    data = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm16(path):
    """Read a 16-bit binary PGM back to floats in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise ValueError("not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 65535:
        raise ValueError(f"expected maxval 65535, got {maxval}")
    data = np.frombuffer(raw[pos : pos + w * h * 2], dtype=">u2").reshape(h, w)
    return data.astype(np.float64) / 65535.0
