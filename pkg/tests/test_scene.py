# -*- coding: utf-8 -*-
import unittest

import numpy as np
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from cameo.errors import SpreadError
from cameo.probe import BINS, angle_bin
from cameo.scene import (
    Box,
    Camera,
    Scene,
    SceneSetSpec,
    Sphere,
    generate_scene_set,
    plucker_embedding,
    relative_rotation_deg,
    render_depth,
    render_latent,
    render_pointmap,
)
from cameo.tensors import make_rng


def axis_camera(center=(0.0, 0.0, 0.0), R=None, size=5):
    R = np.eye(3) if R is None else np.asarray(R)
    t = -R @ np.asarray(center, dtype=np.float64)
    return Camera(fx=4.0, fy=4.0, cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
                  R=R, t=t, width=size, height=size)


class TestCamera(unittest.TestCase):

    def test_rejects_bad_rotation(self):
        with self.assertRaises(ValueError):
            axis_camera(R=np.diag([1.0, 1.0, -1.0]))
        with self.assertRaises(ValueError):
            axis_camera(R=2 * np.eye(3))

    def test_look_at_center(self):
        cam = Camera.look_at((0.0, 1.0, 3.0), (0.0, 0.0, 0.0))
        assert_allclose(cam.center, (0.0, 1.0, 3.0), atol=1e-12)
        uv, depth = cam.project([(0.0, 0.0, 0.0)])
        assert_allclose(uv[0], (cam.cx, cam.cy), atol=1e-9)
        self.assertAlmostEqual(float(depth[0]), np.sqrt(10.0), places=9)

    def test_roundtrip_dict(self):
        cam = Camera.look_at((1.0, 0.5, 2.0), (0.0, 0.0, 0.0), width=32,
                             height=24)
        back = Camera.from_dict(cam.to_dict())
        assert_allclose(back.R, cam.R)
        assert_allclose(back.t, cam.t)
        self.assertEqual((back.width, back.height), (32, 24))


class TestRender(unittest.TestCase):

    def setUp(self):
        self.cam = Camera.look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0),
                                  width=65, height=65)
        self.scene = Scene([Sphere((0, 0, 0), 1.0)],
                           [self.cam, Camera.look_at((3.0, 0.0, 0.0), (0, 0, 0),
                                                     width=65, height=65)])

    def test_axial_hit(self):
        '''Test the centre pixel of an axial camera hits (0, 0, 1)'''

        pm = render_pointmap(self.scene, 0, (65, 65))
        assert_allclose(pm.values[32, 32], (0.0, 0.0, 1.0), atol=1e-9)
        depth = render_depth(self.scene, 0, (65, 65))
        self.assertAlmostEqual(float(depth[32, 32]), 2.0, places=9)

    def test_facing_away(self):
        away = Camera.look_at((0.0, 0.0, 3.0), (0.0, 0.0, 6.0))
        scene = Scene([Sphere((0, 0, 0), 1.0)], [away, self.cam])
        pm = render_pointmap(scene, 0, (16, 16))
        self.assertFalse(pm.valid.any())
        self.assertTrue(np.isnan(pm.values).all())

    def test_nearest_hit_wins(self):
        scene = Scene([Sphere((0, 0, 0), 1.0), Box((0, 0, 1.5), (0.2, 0.2, 0.2))],
                      [self.cam, self.cam])
        pm = render_pointmap(scene, 0, (65, 65))
        self.assertAlmostEqual(float(pm.values[32, 32, 2]), 1.7, places=9)

    def test_reprojection(self):
        '''Test pointmap values reproject to their own pixel and into the
        other view where that view sees the same point'''

        scene = generate_scene_set(SceneSetSpec(scenes=1, views=2), make_rng(4))[0]
        res = (48, 48)
        for index, cam in enumerate(scene.cameras):
            pm = render_pointmap(scene, index, res)
            valid = pm.valid
            uv, _ = cam.scaled(res).project(pm.values[valid])
            rows, cols = np.nonzero(valid)
            self.assertLessEqual(np.abs(uv[:, 0] - cols).max(), 0.5)
            self.assertLessEqual(np.abs(uv[:, 1] - rows).max(), 0.5)

        pm0 = render_pointmap(scene, 0, res)
        pm1 = render_pointmap(scene, 1, res)
        depth1 = render_depth(scene, 1, res)
        cam1 = scene.cameras[1].scaled(res)
        points = pm0.values[pm0.valid]
        uv, depth = cam1.project(points)
        px = np.round(uv).astype(int)
        inside = (px[:, 0] >= 0) & (px[:, 0] < 48) & (px[:, 1] >= 0) & (px[:, 1] < 48)
        px = px[inside]
        surface = depth1[px[:, 1], px[:, 0]]
        seen = np.abs(surface - depth[inside]) < 0.02 * depth[inside]
        self.assertTrue(seen.any())
        other = pm1.values[px[seen, 1], px[seen, 0]]
        gap = np.linalg.norm(other - points[inside][seen], axis=-1)
        self.assertLessEqual(gap.max(), 0.15)

    def test_latent_background_and_texture(self):
        latent = render_latent(self.scene, 0, (65, 65), channels=4)
        self.assertEqual(latent.shape, (65, 65, 4))
        assert_allclose(latent[0, 0], 0.0)
        self.assertGreater(latent[32, 32, 0], 0.0)
        with self.assertRaises(ValueError):
            render_latent(self.scene, 0, (8, 8), channels=0)


class TestPlucker(unittest.TestCase):

    def test_origin_camera(self):
        cam = axis_camera()
        grid = plucker_embedding(cam, (5, 5))
        assert_allclose(grid.values[2, 2], (0, 0, 1, 0, 0, 0), atol=1e-12)

    def test_translated_camera(self):
        cam = axis_camera(center=(1.0, 0.0, 0.0))
        grid = plucker_embedding(cam, (5, 5))
        assert_allclose(grid.directions[2, 2], (0, 0, 1), atol=1e-12)
        assert_allclose(grid.moments[2, 2], (0, -1, 0), atol=1e-12)

    def test_line_invariants(self):
        rng = make_rng(1)
        scene = generate_scene_set(SceneSetSpec(scenes=1, views=3), rng)[0]
        for cam in scene.cameras:
            grid = plucker_embedding(cam, (24, 32))
            norms = np.linalg.norm(grid.directions, axis=-1)
            assert_allclose(norms, 1.0, atol=1e-6)
            dots = np.sum(grid.directions * grid.moments, axis=-1)
            self.assertLessEqual(np.abs(dots).max(), 1e-6)


class TestRelativeRotation(unittest.TestCase):

    def test_identical(self):
        cam = axis_camera()
        self.assertAlmostEqual(relative_rotation_deg(cam, cam), 0.0, places=6)

    def test_yaw(self):
        R_a = Rotation.from_euler('xyz', (10, 20, 30), degrees=True).as_matrix()
        yaw = Rotation.from_euler('y', 90, degrees=True).as_matrix()
        a = axis_camera(R=R_a)
        b = axis_camera(R=R_a @ yaw)
        self.assertAlmostEqual(relative_rotation_deg(a, b), 90.0, places=6)

    def test_quaternion_oracle(self):
        '''Test random rotation pairs against the quaternion angle'''

        rotations = Rotation.random(40, random_state=7)
        quats = rotations.as_quat()
        mats = rotations.as_matrix()
        for n in range(0, 40, 2):
            a, b = axis_camera(R=mats[n]), axis_camera(R=mats[n + 1])
            dot = min(1.0, abs(float(np.dot(quats[n], quats[n + 1]))))
            expected = np.degrees(2.0 * np.arccos(dot))
            self.assertAlmostEqual(relative_rotation_deg(a, b), expected, places=5)
            self.assertAlmostEqual(relative_rotation_deg(a, b),
                                   relative_rotation_deg(b, a), places=9)


class TestGenerate(unittest.TestCase):

    def test_spread(self):
        spec = SceneSetSpec(scenes=3, views=4, spread_deg=120.0)
        for scene in generate_scene_set(spec, make_rng(0)):
            self.assertEqual(len(scene.cameras), 4)
            for i, a in enumerate(scene.cameras):
                for b in scene.cameras[i + 1:]:
                    self.assertLessEqual(relative_rotation_deg(a, b), 120.0)

    def test_deterministic(self):
        spec = SceneSetSpec(scenes=2, views=3)
        first = [s.to_json() for s in generate_scene_set(spec, make_rng(0))]
        second = [s.to_json() for s in generate_scene_set(spec, make_rng(0))]
        self.assertEqual(first, second)

    def test_bins_occupied(self):
        '''Test 100 scenes cover every rotation bin with >= 5% of pairs'''

        spec = SceneSetSpec(scenes=100, views=4, spread_deg=120.0, res=(8, 8))
        thetas = []
        for scene in generate_scene_set(spec, make_rng(0)):
            cams = scene.cameras
            thetas.extend(
                relative_rotation_deg(a, b)
                for i, a in enumerate(cams) for b in cams[i + 1:]
            )
        labels = [angle_bin(t) for t in thetas]
        for label, _, _ in BINS:
            self.assertGreaterEqual(labels.count(label) / float(len(labels)), 0.05)

    def test_bad_spread(self):
        with self.assertRaises(SpreadError):
            generate_scene_set(SceneSetSpec(spread_deg=0.0), make_rng(0))
        with self.assertRaises(SpreadError):
            generate_scene_set(SceneSetSpec(views=1), make_rng(0))


if __name__ == '__main__':
    unittest.main()
