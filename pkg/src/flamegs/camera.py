"""Pinhole camera geometry: projection, covariance splatting, pose deltas.

Conventions: world-to-camera pose p_cam = R_c @ p_world + T_c with camera
x right, y down, z forward. Pixel centers sit on integer coordinates, so a
point on the optical axis projects exactly to (cx, cy).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

Z_NEAR = 0.01              # camera-frame depth below which Gaussians are culled
COV2D_FLOOR = 0.3          # px^2 added to both diagonals of the screen covariance


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside image")


@dataclass
class Pose:
    """World-to-camera rotation and translation."""

    R_c: np.ndarray  # (3, 3)
    T_c: np.ndarray  # (3,)

    def __post_init__(self):
        self.R_c = np.asarray(self.R_c, dtype=np.float64)
        self.T_c = np.asarray(self.T_c, dtype=np.float64)
        err = np.abs(self.R_c.T @ self.R_c - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.R_c) - 1.0) > 1e-6:
            raise ValueError("pose rotation not orthonormal")


@dataclass
class PoseDelta:
    """Small optimizable correction: axis-angle rotation and a translation."""

    delta_rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.delta_rot = np.asarray(self.delta_rot, dtype=np.float64)
        self.delta_t = np.asarray(self.delta_t, dtype=np.float64)

    def is_zero(self) -> bool:
        return not (self.delta_rot.any() or self.delta_t.any())


@dataclass
class CameraView:
    id: str
    intrinsics: Intrinsics
    pose: Pose
    pose_delta: PoseDelta = field(default_factory=PoseDelta)
    image: np.ndarray | None = None  # (H, W) grayscale in [0, 1]

    def __post_init__(self):
        if self.image is not None:
            h, w = self.image.shape
            if (w, h) != (self.intrinsics.width, self.intrinsics.height):
                raise ValueError("image dimensions do not match intrinsics")

    def effective_pose(self) -> Pose:
        return apply_pose_delta(self.pose, self.pose_delta)


@dataclass
class Ray:
    origin: np.ndarray     # (3,)
    direction: np.ndarray  # (3,) unit


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def axis_angle_to_matrix(r):
    """Rodrigues exponential map, series-stabilized near zero."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    K = skew(r)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_right_jacobian(r):
    """Right Jacobian of the SO(3) exponential: exp(r + d) ~ exp(r) exp(J_r d)."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    K = skew(r)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    a = (1.0 - np.cos(theta)) / t2
    b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) - a * K + b * (K @ K)


def apply_pose_delta(pose: Pose, delta: PoseDelta) -> Pose:
    """Compose the calibrated pose with its optimizable correction.

    R' = R_c @ exp(delta_rot), T' = T_c + delta_t. A zero delta returns the
    input pose components unchanged (bitwise).
    """
    if delta.is_zero():
        return Pose(R_c=pose.R_c.copy(), T_c=pose.T_c.copy())
    return Pose(
        R_c=pose.R_c @ axis_angle_to_matrix(delta.delta_rot),
        T_c=pose.T_c + delta.delta_t,
    )


def camera_center(pose: Pose):
    """Optical center in world coordinates: -R^T T."""
    return -pose.R_c.T @ pose.T_c


class Culled:
    """Marker returned when a point falls behind the near plane."""

    __slots__ = ()

    def __bool__(self):
        return False


CULLED = Culled()


def project_point(mu, view: CameraView, pose: Pose | None = None):
    """Project a world point to pixel coordinates.

    Returns ((px, py), depth), or CULLED when camera-frame depth <= Z_NEAR.
    `pose` may pass a precomposed effective pose to avoid recomputation.
    """
    if pose is None:
        pose = view.effective_pose()
    p = pose.R_c @ np.asarray(mu, dtype=np.float64) + pose.T_c
    if p[2] <= Z_NEAR:
        return CULLED
    intr = view.intrinsics
    px = intr.fx * p[0] / p[2] + intr.cx
    py = intr.fy * p[1] / p[2] + intr.cy
    return np.array([px, py]), float(p[2])


def projection_jacobian(mu_cam, intr: Intrinsics):
    """2x3 Jacobian of the pinhole map at a camera-frame point."""
    x, y, z = np.asarray(mu_cam, dtype=np.float64)
    if z <= Z_NEAR:
        return CULLED
    return np.array(
        [
            [intr.fx / z, 0.0, -intr.fx * x / (z * z)],
            [0.0, intr.fy / z, -intr.fy * y / (z * z)],
        ]
    )


def project_covariance(cov, view: CameraView, mu_cam, pose: Pose | None = None):
    """Screen-space 2x2 covariance: J R cov R^T J^T plus the pixel floor.

    Only the rotation part of the world-to-camera transform acts on the
    covariance (it is translation invariant).
    """
    if pose is None:
        pose = view.effective_pose()
    J = projection_jacobian(mu_cam, view.intrinsics)
    if J is CULLED:
        return CULLED
    m = pose.R_c @ np.asarray(cov, dtype=np.float64) @ pose.R_c.T
    cov2d = J @ m @ J.T
    cov2d[0, 0] += COV2D_FLOOR
    cov2d[1, 1] += COV2D_FLOOR
    return cov2d


def pixel_ray(view: CameraView, pixel, pose: Pose | None = None) -> Ray:
    """Back-project a pixel to a world-space ray from the optical center."""
    px, py = float(pixel[0]), float(pixel[1])
    intr = view.intrinsics
    if not (0 <= px <= intr.width - 1 and 0 <= py <= intr.height - 1):
        raise ValueError(f"pixel ({px}, {py}) outside image bounds")
    if pose is None:
        pose = view.effective_pose()
    d_cam = np.array([(px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy, 1.0])
    d_world = pose.R_c.T @ d_cam
    return Ray(origin=camera_center(pose), direction=d_world / np.linalg.norm(d_world))


def pixel_rays(view: CameraView, px, py, pose: Pose | None = None):
    """Vectorized pixel_ray: px, py arrays -> (origin (3,), directions (N, 3))."""
    if pose is None:
        pose = view.effective_pose()
    intr = view.intrinsics
    d_cam = np.stack(
        [
            (np.asarray(px, dtype=np.float64) - intr.cx) / intr.fx,
            (np.asarray(py, dtype=np.float64) - intr.cy) / intr.fy,
            np.ones(np.shape(px), dtype=np.float64),
        ],
        axis=-1,
    )
    d_world = d_cam @ pose.R_c
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    return camera_center(pose), d_world


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose with +z toward the target and +y pointing down
    in world (image y grows downward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ValueError("view direction parallel to the up vector")
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Pose(R_c=R, T_c=-R @ eye)


@dataclass
class CameraRig:
    cameras: list[CameraView]

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def ids(self):
        return [c.id for c in self.cameras]

    def get(self, cam_id: str) -> CameraView:
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise KeyError(f"no camera with id {cam_id!r}")


def save_rig(path, rig: CameraRig):
    """Camera rig file: UTF-8 JSON {"cameras": [...]}."""
    cams = []
    for c in rig.cameras:
        intr = c.intrinsics
        cams.append(
            {
                "id": c.id,
                "width": intr.width,
                "height": intr.height,
                "fx": intr.fx,
                "fy": intr.fy,
                "cx": intr.cx,
                "cy": intr.cy,
                "R": [float(v) for v in c.pose.R_c.reshape(-1)],
                "t": [float(v) for v in c.pose.T_c],
            }
        )
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"cameras": cams}, f, indent=2)
        f.write("\n")


def load_rig(path) -> CameraRig:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    cams = []
    for c in data["cameras"]:
        cams.append(
            CameraView(
                id=str(c["id"]),
                intrinsics=Intrinsics(
                    fx=float(c["fx"]),
                    fy=float(c["fy"]),
                    cx=float(c["cx"]),
                    cy=float(c["cy"]),
                    width=int(c["width"]),
                    height=int(c["height"]),
                ),
                pose=Pose(
                    R_c=np.array(c["R"], dtype=np.float64).reshape(3, 3),
                    T_c=np.array(c["t"], dtype=np.float64),
                ),
            )
        )
    return CameraRig(cameras=cams)


def save_pose_deltas(path, rig: CameraRig):
    """Serialize optimized pose deltas alongside trained Gaussians."""
    entries = [
        {
            "id": c.id,
            "delta_rot": [float(v) for v in c.pose_delta.delta_rot],
            "delta_t": [float(v) for v in c.pose_delta.delta_t],
        }
        for c in rig.cameras
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(entries, f, indent=2)
        f.write("\n")


def load_pose_deltas(path, rig: CameraRig):
    with open(path, encoding="utf-8") as f:
        entries = json.load(f)
    for e in entries:
        cam = rig.get(str(e["id"]))
        cam.pose_delta = PoseDelta(
            delta_rot=np.array(e["delta_rot"], dtype=np.float64),
            delta_t=np.array(e["delta_t"], dtype=np.float64),
        )
