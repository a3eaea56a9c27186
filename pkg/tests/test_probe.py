# -*- coding: utf-8 -*-
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from cameo.attention import CrossViewAttention, identity_cross_view
from cameo.correspondence import TokenGrid, token_grid
from cameo.dataset import build_scene_data
from cameo.denoiser import ModelConfig, ToyDenoiser
from cameo.errors import GeometryError
from cameo.probe import (
    EvalPair,
    MatchSet,
    angle_bin,
    attention_precision,
    evaluate_pair,
    evaluate_pairs,
    layer_maps,
    layer_sweep,
    lowe_ratio,
    match_descriptors,
    match_from_attention,
    score_matches,
    select_top,
    self_match_precision,
)
from cameo.scene import (
    SceneSetSpec,
    generate_scene_set,
    relative_rotation_deg,
    render_pointmap,
)
from cameo.tensors import make_rng
from . import sphere_scene


def line_grid(n):
    points = np.stack([np.arange(n, dtype=np.float64),
                       np.zeros(n), np.zeros(n)], axis=-1)
    return TokenGrid(1, n, points, np.ones(n, dtype=bool))


class TestRatio(unittest.TestCase):

    def test_examples(self):
        self.assertAlmostEqual(float(lowe_ratio(0.1, 0.5)), 0.8, places=12)
        self.assertEqual(float(lowe_ratio(0.3, 0.3)), 0.0)
        self.assertEqual(float(lowe_ratio(0.0, 0.0)), 0.0)

    def test_select_top(self):
        matches = MatchSet([0, 1, 2], [5, 6, 7], [0.9, 0.1, 0.5])
        top = select_top(matches, 2)
        assert_array_equal(top.src, [0, 2])
        assert_array_equal(select_top(top, 2).src, top.src)
        self.assertEqual(len(select_top(matches, 10)), 3)
        with self.assertRaises(ValueError):
            select_top(matches, 0)

    def test_select_top_ties_by_source(self):
        matches = MatchSet([4, 1, 3], [0, 0, 0], [0.5, 0.5, 0.5])
        assert_array_equal(select_top(matches, 2).src, [1, 3])


class TestMatching(unittest.TestCase):

    def test_one_hot_attention(self):
        attn = CrossViewAttention((0, 1), np.eye(4)[[2, 0, 3, 1]])
        matches = match_from_attention(attn)
        assert_array_equal(matches.dst, [2, 0, 3, 1])
        assert_allclose(matches.ratio, 1.0)

    def test_uniform_attention(self):
        attn = CrossViewAttention((0, 1), np.full((3, 3), 1.0 / 3.0))
        matches = match_from_attention(attn)
        assert_allclose(matches.ratio, 0.0)

    def test_descriptor_methods_agree(self):
        rng = make_rng(0)
        a = rng.normal(size=(6, 6, 8))
        b = rng.normal(size=(6, 6, 8))
        for metric in ('cosine', 'l2'):
            brute = match_descriptors(a, b, metric, 'brute')
            tree = match_descriptors(a, b, metric, 'kdtree')
            assert_array_equal(brute.dst, tree.dst)
            assert_allclose(brute.ratio, tree.ratio, atol=1e-9)

    def test_descriptor_errors(self):
        with self.assertRaises(ValueError):
            match_descriptors(np.ones((2, 3)), np.ones((2, 4)))
        with self.assertRaises(ValueError):
            match_descriptors(np.ones((2, 3)), np.ones((1, 3)))
        with self.assertRaises(ValueError):
            match_descriptors(np.ones((2, 3)), np.ones((2, 3)), metric='dot')


class TestScoring(unittest.TestCase):

    def test_oracle_matches(self):
        grid = line_grid(5)
        matches = MatchSet(np.arange(5), np.arange(5), np.ones(5))
        self.assertEqual(score_matches(matches, grid, grid, rho=0.01), 1.0)
        assert_allclose(matches.distance_3d, 0.0)

    def test_off_by_one(self):
        grid = line_grid(5)
        matches = MatchSet([0, 1], [1, 1], [1.0, 1.0])
        self.assertEqual(score_matches(matches, grid, grid, rho=0.5), 0.5)
        self.assertEqual(score_matches(matches, grid, grid, rho=1.0), 1.0)

    def test_missing_geometry_is_wrong(self):
        grid = line_grid(3)
        grid.points[2] = np.nan
        matches = MatchSet([0, 2], [0, 2], [1.0, 1.0])
        self.assertEqual(score_matches(matches, grid, grid, rho=0.1), 0.5)

    def test_bad_index(self):
        with self.assertRaises(GeometryError):
            score_matches(MatchSet([0], [9], [1.0]), line_grid(3), line_grid(3))
        with self.assertRaises(ValueError):
            score_matches(MatchSet([0], [0], [1.0]), line_grid(3), line_grid(3),
                          rho=0.0)


class TestBins(unittest.TestCase):

    def test_angle_bin(self):
        self.assertEqual(angle_bin(0.0), '0-30')
        self.assertEqual(angle_bin(30.0), '30-60')
        self.assertEqual(angle_bin(120.0), '90-120')
        self.assertIsNone(angle_bin(120.5))

    def test_single_bin(self):
        grid = line_grid(4)
        pair = EvalPair(15.0, grid, grid,
                        attention=identity_cross_view(0, 1, 4))
        report = evaluate_pairs([pair], 'attention', k=10, rho=0.1)
        self.assertEqual(list(report.per_bin), ['0-30'])
        self.assertEqual(report.overall, 1.0)
        self.assertEqual(report.pairs_evaluated, 1)
        self.assertEqual(report.ratio_mode, 'attention')

    def test_excluded_and_empty(self):
        grid = line_grid(4)
        far = EvalPair(150.0, grid, grid, attention=identity_cross_view(0, 1, 4))
        report = evaluate_pairs([far], 'attention', k=10, rho=0.1)
        self.assertEqual(report.pairs_evaluated, 0)
        self.assertEqual(report.per_bin, {})
        with self.assertRaises(ValueError):
            evaluate_pairs([])

    def test_order_invariance(self):
        rng = make_rng(1)
        grid = line_grid(6)
        pairs = []
        for theta in (10.0, 40.0, 70.0, 100.0, 20.0):
            probs = rng.dirichlet(np.ones(6), size=6)
            pairs.append(EvalPair(theta, grid, grid,
                                  attention=CrossViewAttention((0, 1), probs)))
        a = evaluate_pairs(pairs, 'attention', k=3, rho=0.5)
        b = evaluate_pairs(pairs[::-1], 'attention', k=3, rho=0.5)
        self.assertAlmostEqual(a.overall, b.overall, places=12)
        for label, value in a.per_bin.items():
            self.assertAlmostEqual(b.per_bin[label], value, places=12)


class TestDescriptorPrecision(unittest.TestCase):
    '''Ground-truth descriptors score near 1, random ones near 0.'''

    @classmethod
    def setUpClass(cls):
        spec = SceneSetSpec(scenes=6, views=2, res=(128, 128),
                            size=(0.4, 1.0))
        cls.pairs = []
        for scene in generate_scene_set(spec, make_rng(0)):
            pms = [render_pointmap(scene, v, (128, 128)) for v in range(2)]
            theta = relative_rotation_deg(*scene.cameras)
            cls.pairs.append((theta, pms))

    def test_ground_truth_features(self):
        pairs = [
            EvalPair(theta, pms[0], pms[1], feat_a=pms[0].values,
                     feat_b=pms[1].values)
            for theta, pms in self.pairs
        ]
        report = evaluate_pairs(pairs, 'features', metric='l2', k=100,
                                rho=0.02, method='kdtree')
        self.assertGreaterEqual(report.overall, 0.99)

    def test_random_features(self):
        rng = make_rng(2)
        pairs = [
            EvalPair(theta, pms[0], pms[1],
                     feat_a=rng.normal(size=(128, 128, 16)),
                     feat_b=rng.normal(size=(128, 128, 16)))
            for theta, pms in self.pairs
        ]
        report = evaluate_pairs(pairs, 'features', k=100, rho=0.02,
                                method='kdtree')
        self.assertLessEqual(report.overall, 0.05)

    def test_precision_grows_with_radius(self):
        theta, pms = self.pairs[1]
        rng = make_rng(3)
        pair = EvalPair(
            theta, pms[0], pms[1],
            feat_a=pms[0].values + rng.normal(scale=0.05, size=(128, 128, 3)),
            feat_b=pms[1].values + rng.normal(scale=0.05, size=(128, 128, 3)))
        precisions = [
            evaluate_pair(pair, 'features', metric='l2', k=200, rho=rho,
                          resize_grid=32, method='kdtree')[0]
            for rho in (0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 5.0)
        ]
        self.assertEqual(precisions, sorted(precisions))
        self.assertLess(precisions[0], precisions[-1])

    def test_pointmap_source(self):
        theta, pms = self.pairs[0]
        precision, grid = evaluate_pair(
            EvalPair(theta, pms[0], pms[1]), 'pointmap', k=100, rho=0.1,
            resize_grid=32, method='kdtree')
        self.assertEqual(grid, (32, 32))
        self.assertGreaterEqual(precision, 0.9)


class TestModelProbe(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.data = build_scene_data(sphere_scene(res=16, angle_deg=40.0), 4, 4,
                                    channels=3)
        config = ModelConfig(views=2, h=4, w=4, channels=3, d=8, heads=2,
                             blocks=3, ff=12, T=50)
        cls.model = ToyDenoiser(config, make_rng(0))

    def test_layer_maps(self):
        for layer in range(3):
            maps = layer_maps(self.model, self.data, layer)
            self.assertEqual(sorted(maps), [(0, 1), (1, 0)])
            for attn in maps.values():
                self.assertEqual(attn.probs.shape, (16, 16))
                self.assertTrue(attn.check())

    def test_perturbed_maps_are_identity(self):
        maps = layer_maps(self.model, self.data, 1, perturb=True)
        assert_array_equal(maps[(0, 1)].probs, np.eye(16))

    def test_sweep(self):
        reports = layer_sweep(self.model, [self.data], k=5, rho=0.5)
        self.assertEqual(len(reports), 3)
        for report in reports:
            self.assertTrue(0.0 <= report.overall <= 1.0)
            self.assertEqual(report.pairs_evaluated, 2)

    def test_identity_floor(self):
        '''Test the perturbed precision equals self-matching precision'''

        perturbed = attention_precision(self.model, [self.data], k=5, rho=0.5,
                                        perturb=True)
        floor = self_match_precision([self.data], k=5, rho=0.5)
        self.assertEqual(perturbed.overall, floor.overall)

    def test_token_grid_geometry(self):
        pm = render_pointmap(sphere_scene(res=32), 0, (32, 32))
        grid = token_grid(pm, 8, 8)
        pair = EvalPair(0.0, grid, grid,
                        attention=identity_cross_view(0, 1, grid.size))
        precision, shape = evaluate_pair(pair, 'attention', k=1000, rho=1e-6)
        self.assertEqual(shape, (8, 8))
        self.assertEqual(precision, 1.0)


if __name__ == '__main__':
    unittest.main()
