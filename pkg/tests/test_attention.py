# -*- coding: utf-8 -*-
import math
import unittest

import numpy as np
from numpy.testing import assert_allclose

from cameo.attention import (
    AttentionConfig,
    AttentionResult,
    ProjectionHead,
    attention_backward,
    attention_forward,
    cost_logits,
    cost_logits_backward,
    extract_cross_view,
    init_attention_params,
    log_softmax,
    project_and_normalize,
    softmax,
)
from cameo.errors import MissingCacheError
from cameo.tensors import make_rng
from . import numeric_gradient, relative_error, sample_indices


def reference_attention(tokens, params, heads):
    '''Per-head loop over the stacked sequence.'''

    F, n, d = tokens.shape
    x = tokens.reshape(F * n, d)
    dh = d // heads
    mixed = np.zeros_like(x)
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        q = (x @ params['Wq'])[:, cols]
        k = (x @ params['Wk'])[:, cols]
        v = (x @ params['Wv'])[:, cols]
        scores = q @ k.T / math.sqrt(dh)
        scores = np.exp(scores - scores.max(axis=1, keepdims=True))
        mixed[:, cols] = (scores / scores.sum(axis=1, keepdims=True)) @ v
    return (mixed @ params['Wo'] + params['bo']).reshape(F, n, d)


def setup_block(seed=0, F=2, h=3, w=3, d=8, heads=2):
    rng = make_rng(seed)
    cfg = AttentionConfig(F=F, h=h, w=w, d=d, heads=heads)
    params = init_attention_params(cfg, rng)
    params['bo'] = rng.normal(size=d)
    tokens = rng.normal(size=(F, h * w, d))
    return cfg, params, tokens, rng


class TestSoftmax(unittest.TestCase):

    def test_hand_example(self):
        p = softmax(np.array([[0.0, math.log(3.0)]]))
        assert_allclose(p, [[0.25, 0.75]], atol=1e-12)
        assert_allclose(log_softmax(np.array([[0.0, math.log(3.0)]])),
                        np.log([[0.25, 0.75]]), atol=1e-12)

    def test_large_logits_stay_finite(self):
        p = softmax(np.array([[1000.0, 0.0, -1000.0]]))
        self.assertTrue(np.all(np.isfinite(p)))
        assert_allclose(p.sum(), 1.0)


class TestAttentionForward(unittest.TestCase):

    def test_matches_reference(self):
        cfg, params, tokens, _ = setup_block()
        result = attention_forward(tokens, params, cfg.heads)
        assert_allclose(result.output, reference_attention(tokens, params, cfg.heads),
                        atol=1e-10)
        self.assertEqual(result.probs.shape, (2, cfg.sequence, cfg.sequence))
        assert_allclose(result.probs.sum(-1), 1.0, atol=1e-12)

    def test_zero_queries_attend_uniformly(self):
        cfg, params, tokens, _ = setup_block(1)
        params['Wq'][:] = 0.0
        result = attention_forward(tokens, params, cfg.heads)
        assert_allclose(result.probs, 1.0 / cfg.sequence, atol=1e-12)

    def test_perturb_passes_values_through(self):
        cfg, params, tokens, _ = setup_block(2)
        result = attention_forward(tokens, params, cfg.heads, perturb=True)
        x = tokens.reshape(-1, cfg.d)
        expected = x @ params['Wv'] @ params['Wo'] + params['bo']
        assert_allclose(result.output.reshape(-1, cfg.d), expected, atol=1e-12)

    def test_bad_shapes(self):
        cfg, params, tokens, _ = setup_block(3)
        with self.assertRaises(ValueError):
            attention_forward(tokens[0], params, cfg.heads)
        with self.assertRaises(ValueError):
            attention_forward(tokens, params, heads=3)
        with self.assertRaises(ValueError):
            AttentionConfig(F=1, h=2, w=2, d=4)
        with self.assertRaises(ValueError):
            AttentionConfig(F=2, h=2, w=2, d=6, heads=4)


class TestCrossView(unittest.TestCase):

    def test_blocks_tile_full_map(self):
        '''Test the F*F blocks reassemble the full map'''

        cfg, params, tokens, _ = setup_block(4, F=3)
        result = attention_forward(tokens, params, cfg.heads)
        full = result.full_map
        n = cfg.tokens_per_view
        rebuilt = np.zeros_like(full)
        for i in range(3):
            for j in range(3):
                if i == j:
                    rebuilt[i * n:(i + 1) * n, j * n:(j + 1) * n] = \
                        full[i * n:(i + 1) * n, j * n:(j + 1) * n]
                else:
                    block = extract_cross_view(full, i, j, 3)
                    self.assertEqual(block.pair, (i, j))
                    rebuilt[i * n:(i + 1) * n, j * n:(j + 1) * n] = block.probs
        assert_allclose(rebuilt, full)
        self.assertEqual(len(result.cross_views()), 6)

    def test_rejects_self_pair(self):
        with self.assertRaises(ValueError):
            extract_cross_view(np.eye(8), 1, 1, 2)
        with self.assertRaises(ValueError):
            extract_cross_view(np.eye(9), 0, 1, 2)


class TestProjectionHead(unittest.TestCase):

    def test_initial_head_is_mean(self):
        logits = make_rng(5).normal(size=(4, 6, 6))
        z, _ = ProjectionHead(4, rng=make_rng(6)).forward(logits)
        assert_allclose(z, logits.mean(axis=0), atol=1e-12)

    def test_identity_head_is_softmax(self):
        logits = make_rng(7).normal(size=(3, 5, 5))
        attn, _ = project_and_normalize(logits, ProjectionHead.identity(3, 2))
        assert_allclose(attn.probs, softmax(logits[2]), atol=1e-12)
        self.assertTrue(attn.check())

    def test_nonfinite_logits(self):
        logits = np.zeros((2, 3, 3))
        logits[0, 1, 1] = np.nan
        with self.assertRaises(ValueError):
            project_and_normalize(logits, ProjectionHead(2))

    def test_gradients(self):
        '''Test head gradients against central differences'''

        rng = make_rng(8)
        head = ProjectionHead(3, hidden=5, rng=rng)
        head.params['W2'] = rng.normal(size=5)
        logits = rng.normal(size=(3, 4, 4))
        weight = rng.normal(size=(4, 4))

        def loss():
            z, _ = head.forward(logits)
            return float(np.sum(z * weight))

        z, cache = head.forward(logits)
        d_logits, grads = head.backward(weight, cache)
        for name, array in head.params.items():
            for index in sample_indices(array.shape, rng):
                fd = numeric_gradient(loss, array, index)
                self.assertLess(relative_error(grads[name][index], fd), 1e-6)
        for index in sample_indices(logits.shape, rng):
            fd = numeric_gradient(loss, logits, index)
            self.assertLess(relative_error(d_logits[index], fd), 1e-6)


class TestAttentionBackward(unittest.TestCase):

    def test_gradients(self):
        '''Test output and logit gradients against central differences'''

        cfg, params, tokens, rng = setup_block(9)
        G = rng.normal(size=tokens.shape)
        H = rng.normal(size=(cfg.heads, cfg.sequence, cfg.sequence))

        def loss():
            r = attention_forward(tokens, params, cfg.heads)
            return float(np.sum(r.output * G) + np.sum(r.logits * H))

        result = attention_forward(tokens, params, cfg.heads)
        d_tokens, grads = attention_backward(result, params, G, H)
        for name, array in params.items():
            for index in sample_indices(array.shape, rng):
                fd = numeric_gradient(loss, array, index)
                self.assertLess(relative_error(grads[name][index], fd), 1e-6,
                                '{}{}'.format(name, index))
        for index in sample_indices(tokens.shape, rng):
            fd = numeric_gradient(loss, tokens, index)
            self.assertLess(relative_error(d_tokens[index], fd), 1e-6)

    def test_float32_matches_float64(self):
        cfg, params, tokens, rng = setup_block(13)
        G = rng.normal(size=tokens.shape)
        result = attention_forward(tokens, params, cfg.heads)
        d_tokens, grads = attention_backward(result, params, G)

        params32 = {k: v.astype(np.float32) for k, v in params.items()}
        result32 = attention_forward(tokens.astype(np.float32), params32,
                                     cfg.heads)
        d_tokens32, grads32 = attention_backward(result32, params32,
                                                 G.astype(np.float32))
        self.assertEqual(result32.output.dtype, np.float32)
        self.assertEqual(grads32['Wq'].dtype, np.float32)
        self.assertLess(relative_error(d_tokens32, d_tokens), 1e-3)
        for name in grads:
            self.assertLess(relative_error(grads32[name], grads[name]), 1e-3,
                            name)

    def test_perturbed_gradients(self):
        cfg, params, tokens, rng = setup_block(10)
        G = rng.normal(size=tokens.shape)

        def loss():
            r = attention_forward(tokens, params, cfg.heads, perturb=True)
            return float(np.sum(r.output * G))

        result = attention_forward(tokens, params, cfg.heads, perturb=True)
        d_tokens, grads = attention_backward(result, params, G)
        assert_allclose(grads['Wq'], 0.0)
        assert_allclose(grads['Wk'], 0.0)
        for index in sample_indices(params['Wv'].shape, rng):
            fd = numeric_gradient(loss, params['Wv'], index)
            self.assertLess(relative_error(grads['Wv'][index], fd), 1e-6)

    def test_zero_upstream(self):
        cfg, params, tokens, _ = setup_block(11)
        result = attention_forward(tokens, params, cfg.heads)
        d_tokens, grads = attention_backward(result, params)
        assert_allclose(d_tokens, 0.0)
        for g in grads.values():
            assert_allclose(g, 0.0)

    def test_missing_cache(self):
        cfg, params, tokens, _ = setup_block(12)
        result = attention_forward(tokens, params, cfg.heads)
        bare = AttentionResult(result.output, result.logits, result.probs,
                               result.views)
        with self.assertRaises(MissingCacheError):
            attention_backward(bare, params, np.ones_like(tokens))


class TestCostLogits(unittest.TestCase):

    def test_cosine(self):
        tokens = np.array([[[1.0, 0.0], [0.0, 2.0]], [[3.0, 0.0], [1.0, 1.0]]])
        logits, _ = cost_logits(tokens, 0, 1, temperature=0.5)
        expected = np.array([[1.0, math.sqrt(0.5)], [0.0, math.sqrt(0.5)]]) / 0.5
        assert_allclose(logits, expected, atol=1e-12)

    def test_zero_token(self):
        tokens = np.array([[[0.0, 0.0], [0.0, 2.0]], [[3.0, 0.0], [1.0, 1.0]]])
        logits, cache = cost_logits(tokens, 0, 1, temperature=0.5)
        self.assertTrue(np.all(np.isfinite(logits)))
        assert_allclose(logits[0], 0.0)
        d_tokens = cost_logits_backward(np.ones((2, 2)), cache, tokens.shape)
        self.assertTrue(np.all(np.isfinite(d_tokens)))

    def test_gradients(self):
        rng = make_rng(13)
        tokens = rng.normal(size=(3, 5, 4))
        weight = rng.normal(size=(5, 5))

        def loss():
            return float(np.sum(cost_logits(tokens, 2, 0)[0] * weight))

        _, cache = cost_logits(tokens, 2, 0)
        d_tokens = cost_logits_backward(weight, cache, tokens.shape)
        assert_allclose(d_tokens[1], 0.0)
        for index in sample_indices(tokens.shape, rng, count=10):
            fd = numeric_gradient(loss, tokens, index)
            self.assertLess(relative_error(d_tokens[index], fd), 1e-6)


if __name__ == '__main__':
    unittest.main()
