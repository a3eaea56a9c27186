# -*- coding: utf-8 -*-
'''
3D self-attention over the tokens of all views, with exact gradients.

Tokens of the F views are stacked into one sequence of N = F*h*w tokens and
every head attends over the whole sequence. The cross-view map of a pair
(i, j) is the block of query rows of view i and key columns of view j.
'''

# Standard library imports
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

# Third party imports
import numpy as np

# Local imports
from .errors import MissingCacheError

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


@dataclass
class AttentionConfig:
    '''Shape of one attention block.'''

    F: int
    h: int
    w: int
    d: int
    heads: int = 1
    layer_id: int = 0

    def __post_init__(self):
        if self.F < 2:
            raise ValueError('F must be >= 2')
        if self.d % self.heads:
            raise ValueError('d={} is not divisible by heads={}'.format(
                self.d, self.heads))

    @property
    def tokens_per_view(self):
        return self.h * self.w

    @property
    def sequence(self):
        return self.F * self.h * self.w

    @property
    def head_dim(self):
        return self.d // self.heads


@dataclass
class CrossViewAttention:
    '''Attention of view i's queries over view j's keys.'''

    pair: Tuple[int, int]
    probs: np.ndarray
    logits: Optional[np.ndarray] = None

    def check(self, atol=1e-6):
        '''True when every row is a probability vector.'''
        return bool(
            np.all(self.probs >= 0)
            and np.allclose(self.probs.sum(-1), 1.0, atol=atol)
        )


def softmax(x, axis=-1):
    '''Row-wise softmax with max subtraction.'''

    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_backward(probs, dprobs):
    '''Vector-Jacobian product of a row-wise softmax.'''

    return probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))


def init_attention_params(cfg, rng, dtype=np.float64):
    '''Q/K/V/output projections of one block.'''

    std = 1.0 / math.sqrt(cfg.d)
    params = {
        name: rng.normal(0.0, std, size=(cfg.d, cfg.d)).astype(dtype)
        for name in ('Wq', 'Wk', 'Wv', 'Wo')
    }
    params['bo'] = np.zeros(cfg.d, dtype=dtype)
    return params


def _split_heads(x, heads):
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    heads, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * dh)


@dataclass
class AttentionResult:
    '''Output of attention_forward.

    Attributes:
        output: attention output, same shape as the input tokens
        logits: heads x N x N scaled scores Q K^T / sqrt(d_head)
        probs: heads x N x N row-stochastic map actually used for mixing
        views: number of stacked views F
    '''

    output: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    views: int
    cache: dict = field(default=None, repr=False)

    @property
    def full_map(self):
        '''Head-averaged N x N attention map.'''
        return self.probs.mean(axis=0)

    def cross_view(self, i, j):
        return extract_cross_view(self.probs, i, j, self.views, self.logits)

    def cross_views(self):
        '''CrossViewAttention blocks for every ordered pair i != j.'''
        return [
            self.cross_view(i, j)
            for i in range(self.views) for j in range(self.views) if i != j
        ]


def perturb_identity(size, dtype=np.float64):
    '''Replacement attention where every query attends only to itself.'''

    return np.eye(size, dtype=dtype)


def attention_forward(tokens, params, heads=1, perturb=False):
    '''Multi-head attention over the stacked tokens of all views.

    Arguments:
        tokens (ndarray): F x (h*w) x d token features
        params (dict): Wq, Wk, Wv, Wo (d x d) and bo (d)
        heads (int): number of heads
        perturb (bool): replace the attention map by the identity

    Returns:
        AttentionResult
    '''

    tokens = np.asarray(tokens)
    if tokens.ndim != 3:
        raise ValueError('tokens must be F x (h*w) x d, got {}'.format(
            tokens.shape))
    F, n, d = tokens.shape
    if params['Wq'].shape != (d, d) or d % heads:
        raise ValueError('parameter shapes do not match d={} heads={}'.format(
            d, heads))

    x = tokens.reshape(F * n, d)
    scale = 1.0 / math.sqrt(d // heads)
    q = _split_heads(x @ params['Wq'], heads)
    k = _split_heads(x @ params['Wk'], heads)
    v = _split_heads(x @ params['Wv'], heads)
    logits = (q @ k.transpose(0, 2, 1)) * scale
    if perturb:
        probs = np.broadcast_to(
            perturb_identity(F * n, logits.dtype), logits.shape).copy()
    else:
        probs = softmax(logits)
    mixed = _merge_heads(probs @ v)
    out = mixed @ params['Wo'] + params['bo']

    cache = dict(x=x, q=q, k=k, v=v, probs=probs, mixed=mixed, scale=scale,
                 heads=heads, perturb=perturb, shape=tokens.shape)
    return AttentionResult(out.reshape(F, n, d), logits, probs, F, cache)


def attention_backward(result, params, d_output=None, d_logits=None):
    '''Exact gradients of attention_forward.

    Arguments:
        result (AttentionResult): forward result holding the cache
        params (dict): parameters used in the forward pass
        d_output (ndarray): gradient w.r.t. the output, F x (h*w) x d
        d_logits (ndarray): extra gradient w.r.t. the heads x N x N logits,
            eg. from a loss on the cross-view maps

    Returns:
        (d_tokens, grads): input gradient and a dict of parameter gradients
    '''

    cache = getattr(result, 'cache', None)
    if not cache:
        raise MissingCacheError('attention_backward needs a forward cache')

    x, q, k, v = cache['x'], cache['q'], cache['k'], cache['v']
    probs, scale = cache['probs'], cache['scale']
    N, d = x.shape
    grads = {}

    if d_output is None:
        d_output = np.zeros((N, d), dtype=x.dtype)
    dy = np.asarray(d_output).reshape(N, d)
    grads['Wo'] = cache['mixed'].T @ dy
    grads['bo'] = dy.sum(axis=0)
    d_mixed = _split_heads(dy @ params['Wo'].T, cache['heads'])

    d_probs = d_mixed @ v.transpose(0, 2, 1)
    dv = probs.transpose(0, 2, 1) @ d_mixed
    if cache['perturb']:
        dlog = np.zeros_like(probs)
    else:
        dlog = softmax_backward(probs, d_probs)
    if d_logits is not None:
        dlog = dlog + d_logits

    dq = _merge_heads((dlog @ k) * scale)
    dk = _merge_heads((dlog.transpose(0, 2, 1) @ q) * scale)
    dv = _merge_heads(dv)
    grads['Wq'] = x.T @ dq
    grads['Wk'] = x.T @ dk
    grads['Wv'] = x.T @ dv
    dx = dq @ params['Wq'].T + dk @ params['Wk'].T + dv @ params['Wv'].T
    return dx.reshape(cache['shape']), grads


def view_slice(index, tokens_per_view):
    return slice(index * tokens_per_view, (index + 1) * tokens_per_view)


def extract_cross_view(full_map, i, j, views, logits=None):
    '''Block of `full_map` with query rows of view i and key columns of view
    j. Works on N x N maps and on heads x N x N stacks.

    Rows of the block are normalized over all N keys, not over view j.
    '''

    if i == j:
        raise ValueError('cross-view blocks need i != j')
    size = full_map.shape[-1]
    if size % views:
        raise ValueError('map of size {} does not split into {} views'.format(
            size, views))
    n = size // views
    if not (0 <= i < views and 0 <= j < views):
        raise ValueError('view index out of range')
    rows, cols = view_slice(i, n), view_slice(j, n)
    block = full_map[..., rows, cols]
    logit_block = None if logits is None else logits[..., rows, cols]
    return CrossViewAttention((i, j), block.copy(), logit_block)


def identity_cross_view(i, j, tokens_per_view, dtype=np.float64):
    '''Cross-view map of the identity perturbation: every query of view i
    attends to its own spatial position in view j.'''

    return CrossViewAttention((i, j), np.eye(tokens_per_view, dtype=dtype))


class ProjectionHead(object):
    '''Aggregates per-head attention logits into one logit per
    (query, key) entry.

    z = sum_h skip_h * l_h + W2 . tanh(W1^T l + b1)

    The tanh branch is a two-layer perceptron over the head axis. With the
    default initialization skip is the head mean and W2 is zero, so the
    initial aggregate is exactly the mean over heads.
    '''

    def __init__(self, heads, hidden=None, rng=None, dtype=np.float64):
        self.heads = heads
        self.hidden = hidden or 4 * heads
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            'skip': np.full(heads, 1.0 / heads, dtype=dtype),
            'W1': rng.normal(0.0, 0.5 / math.sqrt(heads),
                             size=(heads, self.hidden)).astype(dtype),
            'b1': np.zeros(self.hidden, dtype=dtype),
            'W2': np.zeros(self.hidden, dtype=dtype),
        }

    @classmethod
    def identity(cls, heads, head=0, dtype=np.float64):
        '''Head that passes the logits of one head through unchanged.'''

        proj = cls(heads, dtype=dtype)
        proj.params['skip'][:] = 0.0
        proj.params['skip'][head] = 1.0
        return proj

    def forward(self, head_logits, params=None):
        '''Aggregate heads x n x m logits into n x m logits.'''

        params = params or self.params
        head_logits = np.asarray(head_logits)
        if head_logits.shape[0] != self.heads:
            raise ValueError('expected {} heads, got {}'.format(
                self.heads, head_logits.shape[0]))
        stacked = np.moveaxis(head_logits, 0, -1)
        act = np.tanh(stacked @ params['W1'] + params['b1'])
        z = stacked @ params['skip'] + act @ params['W2']
        return z, dict(stacked=stacked, act=act)

    def backward(self, dz, cache, params=None):
        '''Gradients w.r.t. the head logits and the head parameters.'''

        params = params or self.params
        stacked, act = cache['stacked'], cache['act']
        grads = {
            'skip': np.einsum('nh,n->h', stacked.reshape(-1, self.heads),
                              dz.reshape(-1)),
            'W2': np.einsum('nk,n->k', act.reshape(-1, self.hidden),
                            dz.reshape(-1)),
        }
        dpre = dz[..., None] * params['W2'] * (1.0 - act ** 2)
        grads['W1'] = np.einsum('nh,nk->hk', stacked.reshape(-1, self.heads),
                                dpre.reshape(-1, self.hidden))
        grads['b1'] = dpre.reshape(-1, self.hidden).sum(axis=0)
        dstacked = dz[..., None] * params['skip'] + dpre @ params['W1'].T
        return np.moveaxis(dstacked, -1, 0), grads


def project_and_normalize(head_logits, head, pair=(0, 1), params=None):
    '''Supervised cross-view distribution of a pair.

    Logits of all heads are aggregated by the projection head, then
    normalized with a softmax over the keys of view j only.

    Returns:
        (CrossViewAttention, cache) where cache feeds ProjectionHead.backward
    '''

    if not np.all(np.isfinite(head_logits)):
        raise ValueError('non-finite attention logits')
    z, cache = head.forward(head_logits, params)
    return CrossViewAttention(tuple(pair), softmax(z), z), cache


def cost_logits(tokens, i, j, temperature=0.1):
    '''Cosine-similarity cost volume between view i and view j tokens,
    divided by `temperature`.

    Returns:
        (logits, cache)
    '''

    a, b = tokens[i], tokens[j]
    na = np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), NORM_FLOOR)
    nb = np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), NORM_FLOOR)
    ua, ub = a / na, b / nb
    return (ua @ ub.T) / temperature, dict(
        ua=ua, ub=ub, na=na, nb=nb, i=i, j=j, temperature=temperature)


def cost_logits_backward(dz, cache, tokens_shape, dtype=np.float64):
    '''Gradient of cost_logits w.r.t. the stacked tokens.'''

    ua, ub, temp = cache['ua'], cache['ub'], cache['temperature']
    dua = (dz @ ub) / temp
    dub = (dz.T @ ua) / temp
    dtokens = np.zeros(tokens_shape, dtype=dtype)
    dtokens[cache['i']] += (dua - ua * np.sum(dua * ua, -1, keepdims=True)) / cache['na']
    dtokens[cache['j']] += (dub - ub * np.sum(dub * ub, -1, keepdims=True)) / cache['nb']
    return dtokens
