import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegsplat.errors import LoadError, NumericError, ValidationError
from eegsplat.gaussians import (
    Camera, Gaussian3D, GaussianBatch, camera_ring, composite_pixel, composite_stack,
    compositing_weights, covariance_from_rs, gaussian_eval, make_camera, project,
    project_gaussian, quat_multiply, quat_to_rotmat, render, render_backward,
    render_with_grad, rotmat_to_quat, transmittance,
)
from eegsplat.gaussians.io import read_ply, read_png, read_points, read_raw, write_ply, write_png, write_raw
from helpers import fd_check_render, random_camera, random_quaternions, random_scene, scene_dicts
from oracles import reference_render, rotmat_scipy

IDENTITY_CAM = Camera(np.eye(4), 20.0, 20.0, 8.0, 8.0, 16, 16)


class TestPrimitives:
    def test_gaussian_validation(self):
        Gaussian3D((0, 0, 0))
        for bad in (dict(rotation=(2, 0, 0, 0)), dict(scale=(1, 0, 1)), dict(color=(1.2, 0, 0)),
                    dict(opacity=1.5), dict(mu=(0, 0))):
            with pytest.raises(ValidationError):
                Gaussian3D(**{"mu": (0, 0, 0), **bad})

    def test_batch_list_roundtrip(self, rng):
        b = random_scene(rng, 4)
        back = GaussianBatch.from_list(b.to_list())
        for k, v in b.params().items():
            np.testing.assert_array_equal(getattr(back, k), v)

    def test_rotmat_matches_scipy(self, rng):
        for q in random_quaternions(rng, 50):
            np.testing.assert_allclose(quat_to_rotmat(q), rotmat_scipy(q), atol=1e-14)

    def test_rotmat_to_quat(self, rng):
        for q in random_quaternions(rng, 50):
            back = rotmat_to_quat(quat_to_rotmat(q))
            assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-12

    def test_quat_multiply_composes(self, rng):
        a, b = random_quaternions(rng, 2)
        np.testing.assert_allclose(quat_to_rotmat(quat_multiply(a, b)),
                                   quat_to_rotmat(a) @ quat_to_rotmat(b), atol=1e-14)


class TestCovariance:
    def test_identity(self):
        np.testing.assert_array_equal(covariance_from_rs((1, 0, 0, 0), (1, 1, 1)), np.eye(3))
        np.testing.assert_array_equal(covariance_from_rs((1, 0, 0, 0), (2, 1, 1)), np.diag([4, 1, 1]))

    def test_eigenvalues(self, rng):
        for q in random_quaternions(rng, 20):
            ev = np.linalg.eigvalsh(covariance_from_rs(q, (3, 2, 1)))
            np.testing.assert_allclose(ev, [1, 4, 9], atol=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_symmetric_psd(self, seed):
        rng = np.random.default_rng(seed)
        cov = covariance_from_rs(rng.normal(size=4), rng.uniform(1e-3, 5, 3))
        assert np.array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() > -1e-12


class TestGaussianEval:
    def test_at_mean(self):
        assert gaussian_eval((1, 2, 3), np.eye(3), (1, 2, 3)) == 1.0

    def test_unit_offset(self):
        assert gaussian_eval((0, 0, 0), np.eye(3), (1, 0, 0)) == pytest.approx(math.exp(-0.5), abs=1e-15)

    def test_anisotropic(self, rng):
        cov = covariance_from_rs(random_quaternions(rng, 1)[0], (0.5, 1.5, 2.0))
        mu, p = rng.normal(size=3), rng.normal(size=3)
        d = p - mu
        expected = math.exp(-0.5 * d @ np.linalg.inv(cov) @ d)
        assert abs(gaussian_eval(mu, cov, p) - expected) <= 1e-12

    def test_singular(self):
        with pytest.raises(NumericError):
            gaussian_eval((0, 0, 0), np.diag([1, 1, 0]), (0, 0, 0))


class TestProjection:
    def test_on_axis(self):
        cam = Camera(np.eye(4), 5.0, 5.0, 8.0, 8.0, 16, 16)
        p = project_gaussian(Gaussian3D((0, 0, 5.0), scale=(1, 1, 1)), cam)
        np.testing.assert_array_equal(p.mean2d, [8, 8])
        np.testing.assert_allclose(p.cov2d, np.eye(2) * 1.0 + 0.3 * np.eye(2), atol=1e-15)
        assert p.depth == 5.0

    def test_matrix_product_oracle(self, rng):
        cam = random_camera(rng)
        g = random_scene(rng, 1)
        p = project(g, cam)
        t = cam.R @ g.mu[0] + cam.t
        J = np.array([[cam.fx / t[2], 0, -cam.fx * t[0] / t[2] ** 2],
                      [0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2]])
        Rq = rotmat_scipy(g.rotation[0])
        cov = Rq @ np.diag(g.scale[0] ** 2) @ Rq.T
        expected = J @ cam.R @ cov @ cam.R.T @ J.T + 0.3 * np.eye(2)
        np.testing.assert_allclose(p.cov2d[0], expected, rtol=1e-12)

    def test_behind_camera_culled(self):
        assert project_gaussian(Gaussian3D((0, 0, -1.0)), IDENTITY_CAM) is None

    def test_cov2d_symmetric(self, rng):
        for _ in range(50):
            p = project(random_scene(rng, 5), random_camera(rng))
            assert np.max(np.abs(p.cov2d - np.swapaxes(p.cov2d, 1, 2))) <= 1e-12


class TestCompositing:
    def test_single_opaque(self):
        rgb, a = composite_pixel([((0.2, 0.4, 0.6), 1.0)])
        np.testing.assert_array_equal(rgb, [0.2, 0.4, 0.6])
        assert a == 1.0

    def test_occlusion(self):
        rgb, _ = composite_pixel([((1, 0, 0), 1.0), ((0, 1, 0), 0.7)], background=(0, 0, 1))
        np.testing.assert_array_equal(rgb, [1, 0, 0])

    def test_half_front(self):
        rgb, a = composite_pixel([((1, 0, 0), 0.5), ((0, 1, 0), 1.0)])
        np.testing.assert_array_equal(rgb, [0.5, 0.5, 0])
        assert a == 1.0

    def test_empty_is_background(self):
        rgb, a = composite_pixel([], background=(0.1, 0.2, 0.3))
        np.testing.assert_array_equal(rgb, [0.1, 0.2, 0.3])
        assert a == 0.0

    @given(st.lists(st.floats(0, 1), min_size=0, max_size=30))
    def test_weights_bounded(self, alphas):
        w, T_final = compositing_weights(alphas)
        T = transmittance(alphas)
        assert w.sum() <= 1 + 1e-12
        assert np.all(np.diff(T) <= 0)
        assert abs(w.sum() + T_final - 1) <= 1e-12

    def test_stack_order_invariant(self, rng):
        colors, alphas, depths = rng.random((8, 3)), rng.random(8), rng.random(8)
        perm = rng.permutation(8)
        a = composite_stack(colors, alphas, depths)
        b = composite_stack(colors[perm], alphas[perm], depths[perm])
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]


class TestRender:
    def test_empty_scene(self):
        img = render([], IDENTITY_CAM, (0.2, 0.3, 0.4))
        assert np.all(img.pixels == [0.2, 0.3, 0.4])
        assert np.all(img.alpha == 0)

    def test_opaque_on_pixel(self):
        # pixel (row 8, col 8) samples (8.5, 8.5); put the mean exactly there
        z = 4.0
        x = (8.5 - 8.0) * z / 20.0
        g = Gaussian3D((x, x, z), scale=(0.02, 0.02, 0.02), color=(0.9, 0.1, 0.4), opacity=1.0)
        img = render([g], IDENTITY_CAM, (0, 0, 0))
        np.testing.assert_allclose(img.pixels[8, 8], [0.9, 0.1, 0.4], atol=1e-15)
        assert np.all(img.pixels[0, 0] == 0)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        scene, cam = random_scene(rng, 6), random_camera(rng, size=12)
        bg = (0.1, 0.2, 0.3)
        ref = reference_render(scene_dicts(scene), cam.to_dict(), bg)
        np.testing.assert_allclose(render(scene, cam, bg).pixels, ref, atol=1e-12, rtol=0)

    def test_list_and_batch_agree(self, rng):
        scene, cam = random_scene(rng), random_camera(rng)
        assert np.array_equal(render(scene.to_list(), cam).pixels, render(scene, cam).pixels)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_permutation_bit_identical(self, seed):
        rng = np.random.default_rng(seed)
        scene, cam = random_scene(rng, 7), random_camera(rng)
        perm = rng.permutation(7)
        assert np.array_equal(render(scene.subset(perm), cam).pixels, render(scene, cam).pixels)

    def test_equal_depth_ties(self):
        a = Gaussian3D((0, 0, 3), color=(1, 0, 0), scale=(0.2, 0.2, 0.2), opacity=0.6)
        b = Gaussian3D((0.01, 0, 3), color=(0, 1, 0), scale=(0.2, 0.2, 0.2), opacity=0.6)
        assert np.array_equal(render([a, b], IDENTITY_CAM).pixels, render([b, a], IDENTITY_CAM).pixels)

    @pytest.mark.parametrize("seed", range(3))
    def test_rigid_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        scene, cam = random_scene(rng), random_camera(rng)
        q = random_quaternions(rng, 1)[0]
        R, t = quat_to_rotmat(q), rng.normal(size=3)
        A = np.eye(4)
        A[:3, :3], A[:3, 3] = R, t
        moved = scene.copy()
        moved.mu = scene.mu @ R.T + t
        moved.rotation = quat_multiply(np.tile(q, (len(scene), 1)), scene.rotation)
        cam2 = Camera(cam.world_to_camera @ np.linalg.inv(A), cam.fx, cam.fy, cam.cx, cam.cy,
                      cam.width, cam.height)
        diff = np.abs(render(moved, cam2).pixels - render(scene, cam).pixels)
        assert diff.max() <= 1e-9

    def test_alpha_channel(self, rng):
        scene, cam = random_scene(rng), random_camera(rng)
        white = render(scene, cam, (1, 1, 1)).pixels
        black = render(scene, cam, (0, 0, 0))
        np.testing.assert_allclose(white - black.pixels, np.repeat((1 - black.alpha)[..., None], 3, -1), atol=1e-12)


class TestBackward:
    def test_zero_upstream(self, rng):
        scene, cam = random_scene(rng), random_camera(rng)
        g = render_backward(scene, cam, (0, 0, 0), np.zeros((16, 16, 3)))
        assert all(np.all(v == 0) for v in g.params().values())

    def test_single_gaussian_color(self):
        g = GaussianBatch([[0, 0, 3]], [[1, 0, 0, 0]], [[0.3, 0.2, 0.25]], [[0.3, 0.6, 0.2]], [0.8])
        target = np.full((16, 16, 3), 0.5)
        loss = lambda b: 0.5 * np.sum((render(b, IDENTITY_CAM).pixels - target) ** 2)
        grads = render_backward(g, IDENTITY_CAM, (0, 0, 0), render(g, IDENTITY_CAM).pixels - target)
        for c in range(3):
            bp, bm = g.copy(), g.copy()
            bp.color[0, c] += 1e-4
            bm.color[0, c] -= 1e-4
            fd = (loss(bp) - loss(bm)) / 2e-4
            assert abs(grads.color[0, c] - fd) <= 1e-4 * abs(fd)

    @pytest.mark.parametrize("seed", [100, 101])
    def test_fd_all_groups(self, seed):
        rng = np.random.default_rng(seed)
        scene, cam = random_scene(rng), random_camera(rng)
        worst, checked, skipped = fd_check_render(scene, cam, rng.normal(size=(16, 16, 3)))
        assert checked > 50
        assert worst < 1e-3

    def test_unnormalized_quaternion(self, rng):
        scene, cam = random_scene(rng, 3), random_camera(rng)
        scene.rotation *= 2.5
        worst, checked, _ = fd_check_render(scene, cam, rng.normal(size=(16, 16, 3)))
        assert worst < 1e-3

    def test_culled_get_zero(self):
        g = GaussianBatch([[0, 0, -2], [0, 0, 3]], [[1, 0, 0, 0]] * 2, [[0.3] * 3] * 2,
                          [[0.5] * 3] * 2, [0.9, 0.9])
        grads = render_backward(g, IDENTITY_CAM, (0, 0, 0), np.ones((16, 16, 3)))
        assert np.all(grads.mu[0] == 0) and np.any(grads.mu[1] != 0)

    def test_with_grad_shares_forward(self, rng):
        scene, cam = random_scene(rng), random_camera(rng)
        img, dpix, grads = render_with_grad(scene, cam, (0, 0, 0), lambda im: im.pixels - 0.5)
        ref = render_backward(scene, cam, (0, 0, 0), render(scene, cam).pixels - 0.5)
        assert np.array_equal(img.pixels, render(scene, cam).pixels)
        for k, v in ref.params().items():
            assert np.array_equal(getattr(grads, k), v)

    def test_bad_upstream_shape(self, rng):
        with pytest.raises(ValueError):
            render_backward(random_scene(rng), IDENTITY_CAM, (0, 0, 0), np.zeros((4, 4, 3)))


class TestCameras:
    def test_ring(self):
        cams = camera_ring(8, radius=4, elevation_deg=15, width=8, height=8)
        assert len(cams) == 8
        for c in cams:
            assert np.linalg.norm(c.center) == pytest.approx(4.0)
            # the target projects to the principal point
            p = project_gaussian(Gaussian3D((0, 0, 0)), c)
            np.testing.assert_allclose(p.mean2d, [4, 4], atol=1e-12)

    def test_dict_roundtrip(self, rng):
        cam = random_camera(rng)
        back = Camera.from_dict(cam.to_dict())
        assert np.array_equal(back.world_to_camera, cam.world_to_camera)
        assert (back.fx, back.width, back.near) == (cam.fx, cam.width, cam.near)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            Camera(np.diag([1, 1, -1, 1.0]), 1, 1, 0, 0, 4, 4)
        with pytest.raises(LoadError):
            Camera.from_json("{}")
        with pytest.raises(ValidationError):
            make_camera((0, 5, 0), (0, 0, 0))


class TestFiles:
    def test_ply_roundtrip(self, tmp_path, rng):
        scene = random_scene(rng, 9)
        scene.owner = np.arange(9) % 3
        write_ply(scene, tmp_path / "s.ply")
        back = read_ply(tmp_path / "s.ply")
        for k, v in scene.params().items():
            np.testing.assert_allclose(getattr(back, k), v, rtol=1e-6, atol=1e-7)
        np.testing.assert_array_equal(back.owner, scene.owner)
        np.testing.assert_array_equal(read_points(tmp_path / "s.ply"), back.mu)

    def test_ply_bytes_stable(self, tmp_path, rng):
        scene = random_scene(rng)
        write_ply(scene, tmp_path / "a.ply")
        write_ply(read_ply(tmp_path / "a.ply"), tmp_path / "b.ply")
        assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()

    def test_ply_header(self, tmp_path, rng):
        write_ply(random_scene(rng), tmp_path / "s.ply")
        header = (tmp_path / "s.ply").read_bytes().split(b"end_header")[0].decode()
        assert "format binary_little_endian 1.0" in header
        names = [ln.split()[-1] for ln in header.splitlines() if ln.startswith("property")]
        assert names == ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                         "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]

    def test_bad_ply(self, tmp_path):
        (tmp_path / "bad.ply").write_bytes(b"garbage")
        with pytest.raises(LoadError):
            read_ply(tmp_path / "bad.ply")
        with pytest.raises(LoadError):
            read_ply(tmp_path / "missing.ply")

    def test_png_and_raw(self, tmp_path, rng):
        img = rng.random((5, 7, 3))
        write_png(img, tmp_path / "i.png")
        np.testing.assert_allclose(read_png(tmp_path / "i.png"), img, atol=0.5 / 255 + 1e-12)
        write_raw(img, tmp_path / "i.f32")
        np.testing.assert_array_equal(read_raw(tmp_path / "i.f32"), img.astype(np.float32))
        (tmp_path / "t.f32").write_bytes(b"\x01")
        with pytest.raises(LoadError):
            read_raw(tmp_path / "t.f32")
