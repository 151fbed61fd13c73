"""Anisotropic 3D Gaussian flame representation.

A flame is a set of emissive 3D Gaussians. Each one carries a position,
per-axis scales (stored as logs so gradient steps cannot produce negative
sizes), a unit quaternion for orientation, an opacity logit, and real
spherical-harmonic coefficients for a single luminance channel.

Parameter count per Gaussian: 11 + (sh_degree + 1)**2
(3 position + 3 log-scale + 4 quaternion + 1 opacity logit + SH).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

# Real spherical harmonics basis constants, degrees 0..2, single channel.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)

MAX_SH_DEGREE = 2

FLGS_MAGIC = b"FLGS"
FLGS_VERSION = 1


class InvalidParameterError(ValueError):
    """Raised when Gaussian parameters are non-finite or out of contract."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


def normalize_quaternion(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InvalidParameterError("zero-norm quaternion")
    return q / n


def quaternion_to_matrix(q):
    """Rotation matrix from a (w, x, y, z) quaternion; normalizes first.

    Supports a trailing batch dimension: (..., 4) -> (..., 3, 3).
    """
    q = normalize_quaternion(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_matrix_partials(q_unit):
    """d(rotation matrix)/d(unit quaternion components), shape (..., 4, 3, 3).

    Partial derivatives of the quaternion_to_matrix formula evaluated at an
    already-normalized quaternion; chain through the normalization projection
    separately when differentiating raw parameters.
    """
    q = np.asarray(q_unit, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    D = np.empty(q.shape[:-1] + (4, 3, 3), dtype=np.float64)
    D[..., 0, :, :] = 2 * np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    D[..., 1, :, :] = 2 * np.stack(
        [
            np.stack([zero, y, z], axis=-1),
            np.stack([y, -2 * x, -w], axis=-1),
            np.stack([z, w, -2 * x], axis=-1),
        ],
        axis=-2,
    )
    D[..., 2, :, :] = 2 * np.stack(
        [
            np.stack([-2 * y, x, w], axis=-1),
            np.stack([x, zero, z], axis=-1),
            np.stack([-w, z, -2 * y], axis=-1),
        ],
        axis=-2,
    )
    D[..., 3, :, :] = 2 * np.stack(
        [
            np.stack([-2 * z, -w, x], axis=-1),
            np.stack([w, -2 * z, y], axis=-1),
            np.stack([x, y, zero], axis=-1),
        ],
        axis=-2,
    )
    return D


def build_covariance(log_scale, q):
    """World covariance from log scales and an orientation quaternion.

    Factored as R * diag(s) * diag(s) * R^T with s = exp(log_scale), which is
    symmetric positive definite for any finite inputs.
    """
    log_scale = np.asarray(log_scale, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(q))):
        raise InvalidParameterError("non-finite covariance parameters")
    R = quaternion_to_matrix(q)
    s = np.exp(log_scale)
    V = R * s[..., None, :]
    return V @ np.swapaxes(V, -1, -2)


def sh_basis(direction, degree):
    """Real SH basis values for unit direction(s), shape (..., (degree+1)**2)."""
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise InvalidParameterError(f"sh degree {degree} outside [0, {MAX_SH_DEGREE}]")
    d = np.asarray(direction, dtype=np.float64)
    out = np.empty(d.shape[:-1] + ((degree + 1) ** 2,), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        x, y, z = d[..., 0], d[..., 1], d[..., 2]
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    return out


def sh_basis_gradient(direction, degree):
    """Jacobian of sh_basis wrt the direction, shape (..., (degree+1)**2, 3)."""
    d = np.asarray(direction, dtype=np.float64)
    n = (degree + 1) ** 2
    grad = np.zeros(d.shape[:-1] + (n, 3), dtype=np.float64)
    if degree >= 1:
        grad[..., 1, 1] = -SH_C1
        grad[..., 2, 2] = SH_C1
        grad[..., 3, 0] = -SH_C1
    if degree >= 2:
        x, y, z = d[..., 0], d[..., 1], d[..., 2]
        grad[..., 4, 0] = SH_C2[0] * y
        grad[..., 4, 1] = SH_C2[0] * x
        grad[..., 5, 1] = SH_C2[1] * z
        grad[..., 5, 2] = SH_C2[1] * y
        grad[..., 6, 0] = -2.0 * SH_C2[2] * x
        grad[..., 6, 1] = -2.0 * SH_C2[2] * y
        grad[..., 6, 2] = 4.0 * SH_C2[2] * z
        grad[..., 7, 0] = SH_C2[3] * z
        grad[..., 7, 2] = SH_C2[3] * x
        grad[..., 8, 0] = 2.0 * SH_C2[4] * x
        grad[..., 8, 1] = -2.0 * SH_C2[4] * y
    return grad


@dataclass
class Gaussian3D:
    """One anisotropic emitter."""

    position: np.ndarray      # (3,) world units
    log_scale: np.ndarray     # (3,) log of per-axis stddev
    rotation: np.ndarray      # (4,) unit quaternion, (w, x, y, z)
    opacity_logit: float
    sh_coeffs: np.ndarray     # ((degree+1)**2,)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    def covariance(self):
        return build_covariance(self.log_scale, self.rotation)


def eval_density(g: Gaussian3D, x) -> float:
    """Unnormalized Gaussian density exp(-0.5 * d^T Sigma^-1 d), in (0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    d = x - np.asarray(g.position, dtype=np.float64)
    cov = g.covariance()
    m = float(d @ np.linalg.solve(cov, d))
    return float(np.exp(-0.5 * m))


def eval_luminance(g: Gaussian3D, view_dir) -> float:
    """View-dependent luminance: SH expansion clamped at zero (emission only)."""
    coeffs = np.asarray(g.sh_coeffs, dtype=np.float64)
    degree = int(round(np.sqrt(coeffs.shape[-1]))) - 1
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64), degree)
    return float(max(0.0, basis @ coeffs))


@dataclass
class GaussianSet:
    """Ordered set of Gaussians, stored as packed arrays.

    Arrays share a leading dimension (the Gaussian count). Indexing returns a
    Gaussian3D copy; mutate the arrays directly for in-place updates.
    """

    positions: np.ndarray       # (N, 3)
    log_scales: np.ndarray      # (N, 3)
    rotations: np.ndarray       # (N, 4)
    opacity_logits: np.ndarray  # (N,)
    sh_coeffs: np.ndarray       # (N, (sh_degree+1)**2)
    sh_degree: int = 0

    def __post_init__(self):
        n = self.positions.shape[0]
        want = (self.sh_degree + 1) ** 2
        if self.sh_coeffs.shape != (n, want):
            raise InvalidParameterError(
                f"sh_coeffs shape {self.sh_coeffs.shape} != ({n}, {want})"
            )
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i].copy(),
        )

    def opacities(self):
        return sigmoid(self.opacity_logits)

    def renormalize_rotations(self):
        self.rotations = normalize_quaternion(self.rotations)

    def parameter_count(self) -> int:
        return len(self) * (11 + (self.sh_degree + 1) ** 2)

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            sh_degree=self.sh_degree,
        )

    @staticmethod
    def empty(sh_degree: int) -> "GaussianSet":
        k = (sh_degree + 1) ** 2
        return GaussianSet(
            positions=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            opacity_logits=np.zeros(0),
            sh_coeffs=np.zeros((0, k)),
            sh_degree=sh_degree,
        )


def save_flgs(path, gset: GaussianSet):
    """Write the binary Gaussian snapshot format.

    Layout: magic 'FLGS', little-endian u32 version=1, u32 count,
    u32 sh_degree, then per Gaussian little-endian f32:
    position(3), log_scale(3), quaternion wxyz(4), opacity_logit(1),
    sh_coeffs((sh_degree+1)**2).
    """
    n = len(gset)
    k = (gset.sh_degree + 1) ** 2
    rec = np.empty((n, 11 + k), dtype="<f4")
    rec[:, 0:3] = gset.positions
    rec[:, 3:6] = gset.log_scales
    rec[:, 6:10] = gset.rotations
    rec[:, 10] = gset.opacity_logits
    rec[:, 11:] = gset.sh_coeffs
    with open(path, "wb") as f:
        f.write(FLGS_MAGIC)
        f.write(struct.pack("<III", FLGS_VERSION, n, gset.sh_degree))
        f.write(rec.tobytes())


def load_flgs(path) -> GaussianSet:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FLGS_MAGIC:
            raise ValueError(f"not a FLGS file: bad magic {magic!r}")
        version, n, sh_degree = struct.unpack("<III", f.read(12))
        if version != FLGS_VERSION:
            raise ValueError(f"unsupported FLGS version {version}")
        k = (sh_degree + 1) ** 2
        rec = np.frombuffer(f.read(n * (11 + k) * 4), dtype="<f4").reshape(n, 11 + k)
    rec = rec.astype(np.float64)
    return GaussianSet(
        positions=rec[:, 0:3],
        log_scales=rec[:, 3:6],
        rotations=rec[:, 6:10],
        opacity_logits=rec[:, 10],
        sh_coeffs=rec[:, 11:],
        sh_degree=sh_degree,
    )
