import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from flamegs.camera import (
    CULLED,
    COV2D_FLOOR,
    CameraRig,
    CameraView,
    Intrinsics,
    Pose,
    PoseDelta,
    apply_pose_delta,
    axis_angle_to_matrix,
    camera_center,
    load_pose_deltas,
    load_rig,
    pixel_ray,
    project_covariance,
    project_point,
    projection_jacobian,
    save_pose_deltas,
    save_rig,
    so3_right_jacobian,
)


def make_view(fx=500.0, fy=500.0, cx=400.0, cy=512.0, width=800, height=1024,
              R=None, t=None):
    return CameraView(
        id="cam0",
        intrinsics=Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height),
        pose=Pose(
            R_c=np.eye(3) if R is None else R,
            T_c=np.zeros(3) if t is None else np.asarray(t, dtype=float),
        ),
    )


def random_pose(rng):
    R = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
    t = rng.normal(size=3)
    return Pose(R_c=R, T_c=t)


class TestApplyPoseDelta:
    def test_zero_delta_identity(self):
        rng = np.random.default_rng(0)
        pose = random_pose(rng)
        out = apply_pose_delta(pose, PoseDelta())
        # exact: zero delta must not touch the numbers
        assert np.array_equal(out.R_c, pose.R_c)
        assert np.array_equal(out.T_c, pose.T_c)

    def test_z_axis_quarter_turn(self):
        rng = np.random.default_rng(1)
        pose = random_pose(rng)
        out = apply_pose_delta(pose, PoseDelta(delta_rot=[0, 0, np.pi / 2]))
        rz = np.array([[0.0, -1.0, 0], [1.0, 0.0, 0], [0, 0, 1.0]])
        assert np.allclose(out.R_c, pose.R_c @ rz, atol=1e-12)
        assert np.allclose(out.T_c, pose.T_c)

    def test_matches_homogeneous_matrix_oracle(self):
        # compose 4x4 homogeneous transforms independently and compare a
        # projected world point
        rng = np.random.default_rng(2)
        for _ in range(20):
            pose = random_pose(rng)
            delta = PoseDelta(delta_rot=rng.normal(size=3) * 0.05,
                              delta_t=rng.normal(size=3) * 0.05)
            composed = apply_pose_delta(pose, delta)

            H_base = np.eye(4)
            H_base[:3, :3] = pose.R_c
            H_base[:3, 3] = pose.T_c
            H_delta = np.eye(4)
            H_delta[:3, :3] = Rotation.from_rotvec(delta.delta_rot).as_matrix()
            H = H_base @ H_delta
            H[:3, 3] += delta.delta_t

            p = rng.normal(size=3) + [0, 0, 5.0]
            expected = (H @ np.append(p, 1.0))[:3]
            got = composed.R_c @ p + composed.T_c
            assert np.allclose(got, expected, atol=1e-12)

    def test_orthonormality_preserved(self):
        rng = np.random.default_rng(3)
        pose = random_pose(rng)
        out = apply_pose_delta(pose, PoseDelta(delta_rot=[0.3, -0.2, 0.4],
                                               delta_t=[1, 2, 3]))
        assert np.abs(out.R_c.T @ out.R_c - np.eye(3)).max() < 1e-6

    def test_inverse_delta_returns_pose(self):
        rng = np.random.default_rng(4)
        pose = random_pose(rng)
        # rotation-free delta: exact inverse
        d = PoseDelta(delta_t=np.array([0.1, -0.2, 0.05]))
        back = apply_pose_delta(apply_pose_delta(pose, d),
                                PoseDelta(delta_t=-d.delta_t))
        assert np.allclose(back.R_c, pose.R_c)
        assert np.abs(back.T_c - pose.T_c).max() < 1e-15
        # with rotation: inverse within numerical tolerance
        d = PoseDelta(delta_rot=np.array([0.2, 0.1, -0.3]),
                      delta_t=np.array([0.1, -0.2, 0.05]))
        once = apply_pose_delta(pose, d)
        back = apply_pose_delta(once, PoseDelta(delta_rot=-d.delta_rot,
                                                delta_t=-d.delta_t))
        assert np.abs(back.R_c - pose.R_c).max() < 1e-9
        assert np.abs(back.T_c - pose.T_c).max() < 1e-9


class TestProjectPoint:
    def test_principal_point(self):
        view = make_view()
        res = project_point([0, 0, 2.0], view)
        assert res is not CULLED
        (px, py), depth = res
        assert (px, py) == pytest.approx((400.0, 512.0))
        assert depth == pytest.approx(2.0)

    def test_similar_triangles(self):
        view = make_view()
        (px, _), _ = project_point([0.1, 0, 1.0], view)
        assert px == pytest.approx(450.0)

    def test_behind_camera_culled(self):
        view = make_view()
        assert project_point([0, 0, -1.0], view) is CULLED
        assert project_point([0, 0, 0.005], view) is CULLED

    def test_matches_homogeneous_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            pose = random_pose(rng)
            view = make_view(R=pose.R_c, t=pose.T_c)
            K = np.array([[500.0, 0, 400.0], [0, 500.0, 512.0], [0, 0, 1.0]])
            P = K @ np.hstack([pose.R_c, pose.T_c[:, None]])
            p = camera_center(pose) + pose.R_c.T @ (rng.normal(size=3) * 0.3 + [0, 0, 3.0])
            res = project_point(p, view)
            assert res is not CULLED
            (px, py), depth = res
            h = P @ np.append(p, 1.0)
            assert px == pytest.approx(h[0] / h[2], rel=1e-9)
            assert py == pytest.approx(h[1] / h[2], rel=1e-9)
            assert depth == pytest.approx(h[2], rel=1e-12)


class TestProjectionJacobian:
    def test_on_axis(self):
        intr = Intrinsics(fx=500, fy=600, cx=400, cy=512, width=800, height=1024)
        J = projection_jacobian([0, 0, 2.0], intr)
        assert np.allclose(J, [[250.0, 0, 0], [0, 300.0, 0]])

    def test_finite_difference_oracle(self):
        intr = Intrinsics(fx=500, fy=600, cx=400, cy=512, width=800, height=1024)
        view = make_view(fx=500, fy=600)
        rng = np.random.default_rng(6)
        h = 1e-5
        for _ in range(20):
            p = rng.normal(size=3) * 0.3 + [0, 0, 2.0]
            J = projection_jacobian(p, intr)
            fd = np.zeros((2, 3))
            for k in range(3):
                dp = np.zeros(3)
                dp[k] = h
                (a, b), _ = project_point(p + dp, view)
                (c, d), _ = project_point(p - dp, view)
                fd[:, k] = [(a - c) / (2 * h), (b - d) / (2 * h)]
            assert np.allclose(J, fd, rtol=1e-5, atol=1e-4)

    def test_inverse_depth_scaling(self):
        intr = Intrinsics(fx=500, fy=500, cx=400, cy=512, width=800, height=1024)
        J1 = projection_jacobian([0.2, 0.1, 1.0], intr)
        J2 = projection_jacobian([0.2, 0.1, 2.0], intr)
        assert J2[0, 0] == pytest.approx(J1[0, 0] / 2)
        assert J2[1, 1] == pytest.approx(J1[1, 1] / 2)

    def test_behind_near_plane(self):
        intr = Intrinsics(fx=500, fy=500, cx=400, cy=512, width=800, height=1024)
        assert projection_jacobian([0, 0, 0.0], intr) is CULLED


class TestProjectCovariance:
    def test_isotropic_on_axis(self):
        view = make_view(fx=500, fy=500)
        s = 0.02
        cov = (s**2) * np.eye(3)
        out = project_covariance(cov, view, [0, 0, 2.0])
        expected = (500 * s / 2.0) ** 2 * np.eye(2) + COV2D_FLOOR * np.eye(2)
        assert np.allclose(out, expected, rtol=1e-12)

    def test_roll_equivariance(self):
        # rotating the camera about its optical axis rotates the screen
        # covariance by the same angle
        rng = np.random.default_rng(7)
        cov = np.diag([0.03, 0.01, 0.02]) ** 2
        theta = 0.7
        rz = np.array([
            [np.cos(theta), -np.sin(theta), 0],
            [np.sin(theta), np.cos(theta), 0],
            [0, 0, 1.0],
        ])
        v1 = make_view()
        v2 = make_view(R=rz)
        p_cam = np.array([0, 0, 2.0])
        s1 = project_covariance(cov, v1, p_cam) - COV2D_FLOOR * np.eye(2)
        s2 = project_covariance(cov, v2, p_cam) - COV2D_FLOOR * np.eye(2)
        r2 = rz[:2, :2]
        assert np.allclose(s2, r2 @ s1 @ r2.T, atol=1e-10)

    def test_trace_strictly_positive(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            pose = random_pose(rng)
            view = make_view(R=pose.R_c, t=pose.T_c)
            cov = np.diag(rng.uniform(1e-6, 0.01, 3))
            p_cam = rng.normal(size=3) * 0.2 + [0, 0, 2.0]
            out = project_covariance(cov, view, p_cam)
            assert np.trace(out) > 0


class TestPixelRay:
    def test_principal_ray(self):
        view = make_view()
        ray = pixel_ray(view, [400.0, 512.0])
        assert np.allclose(ray.direction, [0, 0, 1.0], atol=1e-12)
        assert np.allclose(ray.origin, 0.0)

    def test_round_trip_through_projection(self):
        rng = np.random.default_rng(9)
        pose = random_pose(rng)
        view = make_view(R=pose.R_c, t=pose.T_c)
        for pixel in ([3.0, 7.0], [400.0, 512.0], [799.0, 1023.0], [123.0, 456.0]):
            ray = pixel_ray(view, pixel)
            for t in (0.5, 1.0, 2.0):
                res = project_point(ray.origin + t * ray.direction, view)
                assert res is not CULLED
                (px, py), _ = res
                assert abs(px - pixel[0]) < 1e-6
                assert abs(py - pixel[1]) < 1e-6

    def test_round_trip_lattice(self):
        # full 16x16 subsampled lattice, as in the acceptance checks
        rng = np.random.default_rng(10)
        pose = random_pose(rng)
        view = make_view(R=pose.R_c, t=pose.T_c)
        xs = np.linspace(0, 799, 16)
        ys = np.linspace(0, 1023, 16)
        for x in xs:
            for y in ys:
                ray = pixel_ray(view, [x, y])
                (px, py), _ = project_point(ray.origin + 1.3 * ray.direction, view)
                assert abs(px - x) < 1e-6 and abs(py - y) < 1e-6

    def test_distinct_pixels_nonparallel(self):
        view = make_view()
        r1 = pixel_ray(view, [10.0, 10.0])
        r2 = pixel_ray(view, [11.0, 10.0])
        assert np.linalg.norm(np.cross(r1.direction, r2.direction)) > 0

    def test_out_of_bounds_rejected(self):
        view = make_view()
        with pytest.raises(ValueError):
            pixel_ray(view, [-1.0, 10.0])
        with pytest.raises(ValueError):
            pixel_ray(view, [10.0, 1024.0])


class TestRightJacobian:
    def test_finite_difference(self):
        # exp(r + d) ~ exp(r) exp(J_r d)
        rng = np.random.default_rng(11)
        h = 1e-6
        for _ in range(20):
            r = rng.normal(size=3) * 0.5
            J = so3_right_jacobian(r)
            base = axis_angle_to_matrix(r)
            for k in range(3):
                d = np.zeros(3)
                d[k] = h
                num = base.T @ axis_angle_to_matrix(r + d)
                # log of a small rotation ~ its skew part
                w = np.array([
                    num[2, 1] - num[1, 2],
                    num[0, 2] - num[2, 0],
                    num[1, 0] - num[0, 1],
                ]) / 2.0
                assert np.allclose(w / h, J[:, k], atol=1e-5)

    def test_small_angle_series(self):
        J = so3_right_jacobian(np.array([1e-9, 0, 0]))
        assert np.allclose(J, np.eye(3), atol=1e-8)


class TestRigIO:
    def make_rig(self):
        rng = np.random.default_rng(12)
        cams = []
        for i in range(3):
            pose = random_pose(rng)
            cams.append(CameraView(
                id=f"cam{i}",
                intrinsics=Intrinsics(fx=500 + i, fy=501.5, cx=100, cy=120,
                                      width=200, height=240),
                pose=pose,
            ))
        return CameraRig(cameras=cams)

    def test_rig_json_round_trip(self, tmp_path):
        rig = self.make_rig()
        path = tmp_path / "rig.json"
        save_rig(path, rig)
        back = load_rig(path)
        assert back.ids() == rig.ids()
        for a, b in zip(rig, back):
            assert np.allclose(a.pose.R_c, b.pose.R_c)
            assert np.allclose(a.pose.T_c, b.pose.T_c)
            assert a.intrinsics == b.intrinsics

    def test_pose_delta_round_trip(self, tmp_path):
        rig = self.make_rig()
        rig.cameras[1].pose_delta = PoseDelta(delta_rot=[0.01, 0, -0.02],
                                              delta_t=[0.1, 0.2, 0.3])
        path = tmp_path / "deltas.json"
        save_pose_deltas(path, rig)
        rig2 = self.make_rig()
        load_pose_deltas(path, rig2)
        assert np.allclose(rig2.cameras[1].pose_delta.delta_rot, [0.01, 0, -0.02])
        assert np.allclose(rig2.cameras[1].pose_delta.delta_t, [0.1, 0.2, 0.3])
        assert rig2.cameras[0].pose_delta.is_zero()
